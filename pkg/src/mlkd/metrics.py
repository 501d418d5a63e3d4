"""Accuracy, token-level micro-F1 and serialisable metric reports."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, LabelCatalog, Vocabulary, encode_batch, iter_batches
from .encoder import Encoder, Task
from .errors import ConfigError

MODES = ("all", "exclude-O")


def accuracy(pred, gold) -> float:
    pred, gold = np.asarray(pred), np.asarray(gold)
    if pred.shape != gold.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gold.shape}")
    if pred.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    return float((pred == gold).sum() / pred.size)


def class_tallies(pred, gold, n_classes: int) -> np.ndarray:
    """(n_classes, 3) integer array of TP, FP, FN per class."""
    pred, gold = np.asarray(pred).ravel(), np.asarray(gold).ravel()
    tp = np.bincount(gold[pred == gold], minlength=n_classes)
    fp = np.bincount(pred[pred != gold], minlength=n_classes)
    fn = np.bincount(gold[pred != gold], minlength=n_classes)
    return np.stack([tp, fp, fn], axis=1)[:n_classes]


def micro_f1_from_tallies(tallies: np.ndarray) -> float:
    tp, fp, fn = (int(x) for x in np.asarray(tallies).sum(axis=0))
    denom = 2 * tp + fp + fn
    # nothing to find and nothing predicted: vacuously perfect
    return 1.0 if denom == 0 else 2 * tp / denom


def _scored(pred, gold, mask):
    pred, gold = np.asarray(pred), np.asarray(gold)
    if pred.shape != gold.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gold.shape}")
    keep = np.ones(gold.shape, bool) if mask is None else np.asarray(mask).astype(bool)
    if not keep.any():
        raise ValueError("no scoreable positions")
    return pred[keep], gold[keep]


def token_tallies(pred, gold, mask=None, n_classes=None, mode="all", outside_id=0) -> dict[int, np.ndarray]:
    """Per-class TP/FP/FN over masked positions; exclude-O mode drops the O row,
    so gold==pred==O positions count nowhere while O-confusions remain FP/FN of
    the slot class involved."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    p, g = _scored(pred, gold, mask)
    n_classes = n_classes or int(max(p.max(), g.max())) + 1
    table = class_tallies(p, g, n_classes)
    return {c: table[c] for c in range(n_classes) if not (mode == "exclude-O" and c == outside_id)}


def token_micro_f1(pred, gold, mask=None, mode="all", outside_id=0, n_classes=None) -> float:
    tallies = token_tallies(pred, gold, mask, n_classes, mode, outside_id)
    return micro_f1_from_tallies(np.array(list(tallies.values())).reshape(-1, 3))


# ---------------------------------------------------------------- reports

@dataclass
class MetricReport:
    task: str
    split: str
    metric: str
    mode: str
    value: float
    n: int
    per_class: dict = field(default_factory=dict)
    checkpoint: str | None = None
    corpus: str | None = None
    seed: int | None = None
    config_hash: str | None = None

    def recompute(self) -> float:
        rows = np.array([[c["tp"], c["fp"], c["fn"]] for c in self.per_class.values()]).reshape(-1, 3)
        if self.metric == "accuracy":
            return float(rows[:, 0].sum() / self.n)
        return micro_f1_from_tallies(rows)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=False)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def collect_predictions(model: Encoder, samples, vocab: Vocabulary, catalog: LabelCatalog, task, max_len=512, batch_size=64):
    """Eval-mode argmax predictions and gold labels; for SF, flattened over scoreable tokens."""
    task = Task.parse(task)
    preds, golds = [], []
    for chunk in iter_batches(samples, batch_size):
        batch = encode_batch(chunk, vocab, catalog, max_len)
        pred = model.predict(batch, task)
        gold = batch.targets(task)
        if task.per_token:
            m = batch.token_mask.astype(bool)
            pred, gold = pred[m], gold[m]
        preds.append(pred)
        golds.append(gold)
    return np.concatenate(preds), np.concatenate(golds)


def evaluate(
    model: Encoder,
    corpus: Corpus,
    split: str,
    task,
    *,
    vocab: Vocabulary,
    catalog: LabelCatalog,
    mode: str = "all",
    max_len: int = 512,
    checkpoint: str | None = None,
    corpus_name: str | None = None,
    seed: int | None = None,
) -> MetricReport:
    task = Task.parse(task)
    if catalog != corpus.catalog:
        raise ConfigError("model catalog does not match the corpus catalog")
    samples = corpus.samples(split)
    if not samples:
        raise ConfigError(f"split {split!r} is empty")
    pred, gold = collect_predictions(model, samples, vocab, catalog, task, max_len)
    labels = catalog.labels(task)
    if task.per_token:
        tallies = token_tallies(pred, gold, None, len(labels), mode, catalog.outside_id)
        value = micro_f1_from_tallies(np.array(list(tallies.values())).reshape(-1, 3))
        metric = "micro_f1"
    else:
        tallies = token_tallies(pred, gold, None, len(labels), "all")
        value = accuracy(pred, gold)
        metric, mode = "accuracy", "all"
    per_class = {labels[c]: {"tp": int(t[0]), "fp": int(t[1]), "fn": int(t[2])} for c, t in tallies.items()}
    return MetricReport(
        task=task.value, split=split, metric=metric, mode=mode, value=float(value), n=int(gold.size),
        per_class=per_class, checkpoint=checkpoint, corpus=corpus_name, seed=seed,
        config_hash=config_hash(model.config.to_dict()),
    )
