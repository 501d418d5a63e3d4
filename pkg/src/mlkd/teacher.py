"""Teacher fine-tuning, frozen-backbone probe heads and the frozen ensemble."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Corpus, LabelCatalog, Vocabulary, build_vocabulary, encode_batch, iter_batches
from .encoder import Encoder, EncoderConfig, Task, gradients, head_names
from .errors import ConfigError, DivergenceError
from .losses import loss_sce
from .optim import AdamW, LRSchedule, steps_per_epoch

log = logging.getLogger(__name__)

TRAIN_LOG = "train_log.jsonl"


@dataclass(frozen=True)
class TrainHP:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 5e-5
    warmup_fraction: float = 0.10
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    max_len: int = 512


# A fresh linear head on frozen features needs a far larger step than the
# fine-tuning rate; at 5e-5 it barely leaves its initialisation in 3 epochs.
PROBE_HP = TrainHP(lr=1e-2)


def train_supervised(model: Encoder, samples, vocab, catalog, task: Task, hp: TrainHP, seed: int, names=None):
    """Cross-entropy training of ``names`` (default: all parameters).

    Returns one record per epoch with the mean train loss and step count.
    """
    if not samples:
        raise ConfigError("no training samples")
    rng = np.random.default_rng(seed)
    names = list(model.params) if names is None else list(names)
    per_epoch = steps_per_epoch(len(samples), hp.batch_size)
    sched = LRSchedule(per_epoch * hp.epochs, hp.lr, hp.warmup_fraction)
    opt = AdamW(hp.betas, weight_decay=hp.weight_decay)
    history = []
    for epoch in range(1, hp.epochs + 1):
        losses = []
        for chunk in iter_batches(samples, hp.batch_size, rng.permutation(len(samples))):
            batch = encode_batch(chunk, vocab, catalog, hp.max_len)
            out = model.forward(batch, task, train=True, rng=rng, track=names)
            mask = batch.token_mask if task.per_token else None
            loss = loss_sce(out.logits, batch.targets(task), mask)
            try:
                grads = gradients(loss, {n: out.leaves[n] for n in names})
                opt.step(model.params, grads, sched.lr(opt.step_count + 1))
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at optimizer step {opt.step_count + 1}", step=opt.step_count + 1) from None
            losses.append(float(loss.data))
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "steps": opt.step_count})
        log.info("%s epoch %d loss %.4f", task.value, epoch, history[-1]["train_loss"])
    return history


def finetune_teacher(
    corpus: Corpus,
    task,
    out_dir,
    config: EncoderConfig | None = None,
    hp: TrainHP = TrainHP(),
    seed: int = 0,
    vocab: Vocabulary | None = None,
) -> Path:
    """Fine-tune one teacher on its own task and save the last-epoch weights."""
    task = Task.parse(task)
    samples = corpus.samples("train")
    if not samples:
        raise ConfigError("corpus has an empty train split")
    vocab = vocab or build_vocabulary(corpus)
    config = config or EncoderConfig.teacher(len(vocab), hp.max_len)
    if config.vocab_size != len(vocab):
        raise ConfigError(f"config vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
    model = Encoder(config, {task: corpus.catalog.n_classes(task)}, seed=seed)
    history = train_supervised(model, samples, vocab, corpus.catalog, task, hp, seed)
    meta = {
        "role": "teacher",
        "task": task.value,
        "heads": {task.value: "finetuned"},
        "seed": seed,
        "optimizer_steps": history[-1]["steps"],
        "digest": model.digest(),
    }
    path = save_checkpoint(out_dir, model, corpus.catalog, vocab, meta)
    with open(path / TRAIN_LOG, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
    return path


def _features(model: Encoder, samples, vocab, catalog, task: Task, max_len, batch_size=64):
    """Eval-mode hidden features per sample: the CLS vector, or every token row for SF."""
    feats = []
    for chunk in iter_batches(samples, batch_size):
        batch = encode_batch(chunk, vocab, catalog, max_len)
        out = model.forward(batch)
        for i in range(batch.size):
            if task.per_token:
                length = int(batch.mask[i].sum())
                feats.append(out.hidden.data[i, :length])
            else:
                feats.append(out.pooled.data[i])
    return feats


def train_probe_heads(
    checkpoint,
    corpus: Corpus,
    target_task,
    hp: TrainHP = PROBE_HP,
    seed: int = 0,
    out_dir=None,
) -> Path:
    """Train a linear head for ``target_task`` on a frozen teacher backbone.

    The checkpoint is rewritten in place unless ``out_dir`` is given.
    """
    target = Task.parse(target_task)
    ckpt = load_checkpoint(checkpoint)
    own = ckpt.meta.get("task")
    if own == target.value:
        raise ConfigError(f"teacher's own {target.value} head is fine-tuned; it cannot be probe-trained")
    if ckpt.catalog != corpus.catalog:
        raise ConfigError("corpus catalog differs from the teacher's catalog")
    model = ckpt.model
    rng = np.random.default_rng(seed)
    model.add_head(target, corpus.catalog.n_classes(target), rng)
    backbone = model.digest(model.backbone_names())

    samples = corpus.samples("train")
    feats = _features(model, samples, ckpt.vocab, ckpt.catalog, target, hp.max_len)
    w_name, b_name = head_names(target)
    per_epoch = steps_per_epoch(len(samples), hp.batch_size)
    sched = LRSchedule(per_epoch * hp.epochs, hp.lr, hp.warmup_fraction)
    opt = AdamW(hp.betas, weight_decay=hp.weight_decay)
    history = []
    for epoch in range(1, hp.epochs + 1):
        losses = []
        for idx in iter_batches(list(range(len(samples))), hp.batch_size, rng.permutation(len(samples))):
            W = Tensor(model.params[w_name], requires_grad=True)
            b = Tensor(model.params[b_name], requires_grad=True)
            if target.per_token:
                x, y = _token_rows(feats, samples, idx)
            else:
                x = np.stack([feats[i] for i in idx])
                y = np.array([samples[i][0].intent_id if target is Task.ID else samples[i][1] for i in idx])
            loss = loss_sce(Tensor(x) @ W + b, y)
            grads = gradients(loss, {w_name: W, b_name: b})
            opt.step(model.params, grads, sched.lr(opt.step_count + 1))
            losses.append(float(loss.data))
        history.append({"epoch": epoch, "probe": target.value, "train_loss": float(np.mean(losses))})

    if model.digest(model.backbone_names()) != backbone:
        raise AssertionError("probe training modified the frozen backbone")
    meta = dict(ckpt.meta)
    meta["heads"] = {**meta.get("heads", {}), target.value: "probe"}
    meta.setdefault("probe_history", []).extend(history)
    return save_checkpoint(out_dir or checkpoint, model, ckpt.catalog, ckpt.vocab, meta)


def _token_rows(feats, samples, idx):
    """Stack per-token features (CLS dropped) with their slot labels."""
    xs, ys = [], []
    for i in idx:
        turn = samples[i][0]
        rows = feats[i][1:]
        xs.append(rows)
        ys.append(np.asarray(turn.slot_tag_ids[: len(rows)]))
    return np.concatenate(xs), np.concatenate(ys)


# ---------------------------------------------------------------- the ensemble

@dataclass
class Teacher:
    model: Encoder
    task: Task
    catalog: LabelCatalog
    vocab: Vocabulary
    path: Path | None = None

    @classmethod
    def load(cls, path) -> "Teacher":
        ckpt = load_checkpoint(path)
        task = ckpt.meta.get("task")
        if task is None:
            raise ConfigError(f"{path}: checkpoint is not a teacher (no task in meta)")
        task = Task.parse(task)
        if task not in ckpt.model.heads:
            raise ConfigError(f"{path}: teacher lacks its own {task.value} head")
        return cls(ckpt.model.freeze(), task, ckpt.catalog, ckpt.vocab, Path(path))


@dataclass
class TeacherSignals:
    logits: list
    probs: list
    pooled: list

    @property
    def n_teachers(self) -> int:
        return len(self.logits)


def softmax_np(v: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = v.astype(np.float64) / temperature
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class TeacherEnsemble:
    teachers: list = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= len(self.teachers) <= 3:
            raise ConfigError(f"an ensemble holds 1 to 3 teachers, got {len(self.teachers)}")
        tasks = [t.task for t in self.teachers]
        if len(set(tasks)) != len(tasks):
            raise ConfigError(f"duplicate teacher tasks: {[t.value for t in tasks]}")
        cats = {t.catalog for t in self.teachers}
        if len(cats) != 1:
            raise ConfigError("teachers disagree on the label catalog")

    @classmethod
    def load(cls, paths: Sequence) -> "TeacherEnsemble":
        return cls([Teacher.load(p) for p in paths])

    @property
    def n_teachers(self) -> int:
        return len(self.teachers)

    @property
    def tasks(self) -> list[Task]:
        return [t.task for t in self.teachers]

    @property
    def catalog(self) -> LabelCatalog:
        return self.teachers[0].catalog

    def signals(self, samples, task, temperature=1.0, max_len=512) -> TeacherSignals:
        """Encode ``samples`` with each teacher's own vocabulary, then collect signals."""
        batches = {}
        for t in self.teachers:
            if t.vocab not in batches:
                batches[t.vocab] = encode_batch(samples, t.vocab, t.catalog, max_len)
        return teacher_signals(self, [batches[t.vocab] for t in self.teachers], task, temperature)


def teacher_signals(ens: TeacherEnsemble, batch, task, temperature: float = 1.0) -> TeacherSignals:
    """Eval-mode logits, tempered probabilities and pooled states of every teacher.

    ``batch`` is one ``EncodedBatch`` shared by all teachers, or a list with
    one batch per teacher.
    """
    task = Task.parse(task)
    batches = batch if isinstance(batch, (list, tuple)) else [batch] * ens.n_teachers
    logits, probs, pooled = [], [], []
    for t, b in zip(ens.teachers, batches):
        if task not in t.model.heads:
            raise ConfigError(f"teacher {t.task.value} has no head for task {task.value}; train a probe first")
        out = t.model.forward(b, task)
        v = out.logits.data
        logits.append(v)
        probs.append(softmax_np(v, temperature))
        pooled.append(out.pooled.data)
    shapes = {v.shape for v in logits}
    if len(shapes) != 1:
        raise ConfigError(f"teacher logits disagree in shape: {sorted(shapes)}")
    return TeacherSignals(logits, probs, pooled)


def write_ensemble(path, task, checkpoints) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"task": Task.parse(task).value, "teachers": [str(c) for c in checkpoints]}, indent=1))
    return path


def read_ensemble(path) -> tuple[Task, list[str]]:
    raw = json.loads(Path(path).read_text())
    return Task.parse(raw["task"]), list(raw["teachers"])
