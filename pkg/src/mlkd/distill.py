"""Multi-teacher distillation of one student per task, with early stopping."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .corpus import Corpus, Vocabulary, build_vocabulary, encode_batch
from .encoder import Encoder, EncoderConfig, Task, gradients
from .errors import ConfigError, DivergenceError
from .optim import AdamW, LRSchedule
from .teacher import TeacherEnsemble, TeacherSignals, softmax_np
from .triplets import generate_triplets

log = logging.getLogger(__name__)

DEV_TRIPLET_SALT = 0x5EED


@dataclass(frozen=True)
class DistillHP:
    max_epochs: int = 100
    patience: int | None = 10
    min_delta: float = 1e-6
    batch_size: int = 32
    lr: float = 5e-5
    warmup_fraction: float = 0.10
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    max_len: int = 512
    monitor_after_warmup: bool = True


class EarlyStopping:
    """Stop once the monitored value fails to improve by ``min_delta`` for
    ``patience`` consecutive epochs."""

    def __init__(self, patience: int, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        if value < self.best - self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------- teacher signal cache

def teacher_outputs(teacher, samples, task: Task, max_len=512, chunk=64):
    """Eval-mode logits (trimmed to each sample's length for SF) and pooled states."""
    logits, pooled = [], []
    for start in range(0, len(samples), chunk):
        part = samples[start:start + chunk]
        batch = encode_batch(part, teacher.vocab, teacher.catalog, max_len)
        if task not in teacher.model.heads:
            raise ConfigError(f"teacher {teacher.task.value} has no head for task {task.value}; train a probe first")
        out = teacher.model.forward(batch, task)
        lengths = batch.mask.sum(axis=1).astype(int)
        for i, ln in enumerate(lengths):
            logits.append(out.logits.data[i, :ln] if task.per_token else out.logits.data[i])
            pooled.append(out.pooled.data[i])
    return logits, pooled


class SignalCache:
    """Per-sample teacher outputs, computed once since teachers are frozen.

    ``memo`` may be shared between runs over the same teachers and samples.
    """

    def __init__(self, ensemble: TeacherEnsemble, samples, task: Task, temperature=1.0, max_len=512,
                 memo: dict | None = None, key=None):
        self.task = task
        self.temperature = temperature
        self.logits, self.pooled = [], []
        for t in ensemble.teachers:
            slot = (id(t), task, key, max_len)
            if memo is not None and slot in memo:
                lg, pl, _ = memo[slot]
            else:
                lg, pl = teacher_outputs(t, samples, task, max_len)
                if memo is not None:
                    memo[slot] = (lg, pl, (t, samples))  # keep the keyed objects alive
            self.logits.append(lg)
            self.pooled.append(pl)

    @property
    def n_teachers(self) -> int:
        return len(self.logits)

    def gather(self, idx, width) -> TeacherSignals:
        logits, probs, pooled = [], [], []
        for j in range(self.n_teachers):
            if self.task.per_token:
                k = self.logits[j][idx[0]].shape[-1]
                v = np.zeros((len(idx), width, k))
                for r, i in enumerate(idx):
                    row = self.logits[j][i]
                    v[r, : len(row)] = row
            else:
                v = np.stack([self.logits[j][i] for i in idx])
            logits.append(v)
            probs.append(softmax_np(v, self.temperature))
            pooled.append(np.stack([self.pooled[j][i] for i in idx]))
        return TeacherSignals(logits, probs, pooled)


# ---------------------------------------------------------------- one step

def loss_parts(cfg: L.LossConfig, task: Task, out, batch, signals: TeacherSignals, triplets):
    mask = batch.token_mask if task.per_token else None
    parts = {}
    if "kd" in cfg.enabled:
        parts["kd"] = L.loss_kd(signals.probs, out.logits, mask, cfg.temperature)
    if "sce" in cfg.enabled:
        parts["sce"] = L.loss_sce(out.logits, batch.targets(task), mask)
    if "sim" in cfg.enabled:
        parts["sim"] = L.loss_sim(signals.logits, out.logits, mask)
    if "rel" in cfg.enabled:
        parts["rel"] = L.loss_rel(out.pooled, triplets, cfg.margin, cfg.p_norm)
    if "tp" in cfg.enabled:
        parts["tp"] = L.loss_tp(signals.probs, out.logits, mask)
    return parts


def _batches(n, batch_size, order, min_size):
    idx = [list(order[s:s + batch_size]) for s in range(0, n, batch_size)]
    if len(idx) > 1 and len(idx[-1]) < min_size:
        idx[-2].extend(idx.pop())
    return idx


def _mean_records(records):
    keys = records[0].keys()
    return {k: float(np.mean([r[k] for r in records])) for k in keys}


@dataclass
class DistillResult:
    student: Encoder
    vocab: Vocabulary
    history: list = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0


def distill_student(
    ensemble: TeacherEnsemble,
    corpus: Corpus,
    task,
    student_config: EncoderConfig | None = None,
    loss_config: L.LossConfig = L.LossConfig(),
    hp: DistillHP = DistillHP(),
    seed: int = 0,
    vocab: Vocabulary | None = None,
    history_path=None,
    memo: dict | None = None,
) -> DistillResult:
    """Train a student for ``task`` against the frozen ``ensemble``.

    Each step: teacher signals (eval mode), triplet votes, student forward in
    train mode, the enabled losses summed without weights, one AdamW update.
    The generator is consumed in a fixed order per step: triplet draws, then
    dropout masks. After every epoch the mean total loss on the dev split is
    recorded (with a fixed triplet stream so epochs are comparable). Early
    stopping watches that value from the end of warm-up on, and the
    parameters of the best monitored epoch are returned.

    Teacher outputs are computed once per sample (teachers are frozen and
    deterministic); pass the same ``memo`` dict to reuse them across runs.
    """
    task = Task.parse(task)
    if ensemble.catalog != corpus.catalog:
        raise ConfigError("ensemble catalog differs from the corpus catalog")
    if "rel" in loss_config.enabled and ensemble.n_teachers < 3:
        warnings.warn(f"relation loss with {ensemble.n_teachers} teacher(s): the vote cannot form a majority of three")
    vocab = vocab or build_vocabulary(corpus)
    student_config = student_config or EncoderConfig.desk_student(len(vocab), hp.max_len)
    if student_config.vocab_size != len(vocab):
        raise ConfigError("student vocab_size does not match the vocabulary")
    train = corpus.samples("train")
    dev = corpus.samples("dev")
    use_rel = "rel" in loss_config.enabled
    min_batch = 3 if use_rel else 1
    if use_rel and min(hp.batch_size, len(train)) < 3:
        raise ConfigError("relation loss needs batches of at least 3 samples")
    early = hp.patience is not None and hp.patience > 0
    if early and not dev:
        raise ConfigError("early stopping needs a non-empty dev split")

    rng = np.random.default_rng(seed)
    catalog = corpus.catalog
    student = Encoder(student_config, {task: catalog.n_classes(task)}, seed=seed)
    train_cache = SignalCache(ensemble, train, task, loss_config.temperature, hp.max_len, memo, (id(corpus), "train"))
    dev_cache = (SignalCache(ensemble, dev, task, loss_config.temperature, hp.max_len, memo, (id(corpus), "dev"))
                 if dev else None)

    n_batches = len(_batches(len(train), hp.batch_size, np.arange(len(train)), min_batch))
    sched = LRSchedule(n_batches * hp.max_epochs, hp.lr, hp.warmup_fraction)
    opt = AdamW(hp.betas, weight_decay=hp.weight_decay)
    stopper = EarlyStopping(hp.patience or 0, hp.min_delta)
    best_params = None
    history = []
    sink = open(history_path, "w", encoding="utf-8") if history_path else None

    def run_batch(samples, cache, idx, step_rng, train_mode):
        chunk = [samples[i] for i in idx]
        batch = encode_batch(chunk, vocab, catalog, hp.max_len)
        signals = cache.gather(idx, batch.width)
        triplets = generate_triplets(signals.pooled, step_rng, loss_config.vote_distance) if use_rel else None
        out = student.forward(batch, task, train=train_mode, rng=step_rng, track=train_mode)
        return out, loss_parts(loss_config, task, out, batch, signals, triplets)

    try:
        epoch = 0
        for epoch in range(1, hp.max_epochs + 1):
            records = []
            for idx in _batches(len(train), hp.batch_size, rng.permutation(len(train)), min_batch):
                out, parts = run_batch(train, train_cache, idx, rng, True)
                bd = L.total_loss(parts, loss_config)
                try:
                    grads = gradients(bd.objective, out.leaves)
                    opt.step(student.params, grads, sched.lr(opt.step_count + 1))
                except DivergenceError as exc:
                    raise DivergenceError(f"{exc} (epoch {epoch}, step {opt.step_count + 1})",
                                          step=opt.step_count + 1) from None
                records.append(bd.as_record())
            rows = [{"epoch": epoch, "split": "train", **_mean_records(records)}]

            if dev_cache is not None:
                dev_rng = np.random.default_rng([seed, DEV_TRIPLET_SALT])
                dev_records = []
                for idx in _batches(len(dev), 64, np.arange(len(dev)), min_batch):
                    _, parts = run_batch(dev, dev_cache, idx, dev_rng, False)
                    dev_records.append(L.total_loss(parts, loss_config).as_record())
                rows.append({"epoch": epoch, "split": "dev", **_mean_records(dev_records)})
            history.extend(rows)
            if sink:
                for r in rows:
                    sink.write(json.dumps(r) + "\n")
                sink.flush()
            log.info("epoch %d %s", epoch, rows[-1])

            # the monitor starts once warm-up is over; before that the loss
            # mostly tracks the rising learning rate
            if early and (opt.step_count >= sched.warmup_steps or not hp.monitor_after_warmup):
                if stopper.update(rows[-1]["total"], epoch):
                    best_params = {n: a.copy() for n, a in student.params.items()}
                if stopper.should_stop:
                    break
    finally:
        if sink:
            sink.close()

    if early and best_params is not None:
        student.params = best_params
    return DistillResult(student, vocab, history, stopper.best_epoch if early else epoch, epoch)


def write_history(history, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for r in history:
            fh.write(json.dumps(r) + "\n")
    return path
