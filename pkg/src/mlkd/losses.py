"""The five distillation objectives and their unweighted combination.

Student quantities are autograd tensors; teacher quantities are plain
arrays (teachers are frozen). For slot filling every per-class quantity is
reduced over the scoreable tokens only, by flattening (N, L, k) logits to
(M, k) rows first.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import IGNORE_INDEX
from .errors import ConfigError, DivergenceError

EPS = 1e-12
LOSS_NAMES = ("kd", "sce", "sim", "rel", "tp")


def _row_index(shape, mask):
    if mask is None:
        return None
    mask = np.asarray(mask)
    if mask.shape != tuple(shape[:-1]):
        raise ValueError(f"mask shape {mask.shape} does not match logits {tuple(shape)}")
    return np.flatnonzero(mask.reshape(-1))


def rows(x, mask=None):
    """Flatten to (rows, classes), keeping only positions where ``mask`` is set."""
    idx = _row_index(x.shape, mask)
    k = x.shape[-1]
    flat = x.reshape(-1, k)
    if idx is None:
        return flat
    if len(idx) == 0:
        raise ValueError("no scoreable positions under the mask")
    return flat[idx]


def _check_teachers(arrays, student: Tensor):
    if not arrays:
        raise ValueError("at least one teacher signal is required")
    for a in arrays:
        if a.shape != student.shape:
            raise ValueError(f"teacher signal shape {a.shape} != student logits {student.shape}")


def loss_sce(student_logits: Tensor, targets: np.ndarray, mask=None) -> Tensor:
    """Mean cross-entropy against gold labels; ``IGNORE_INDEX`` targets are skipped."""
    targets = np.asarray(targets)
    keep = targets != IGNORE_INDEX
    if mask is not None:
        keep &= np.asarray(mask).astype(bool)
    if not keep.any():
        raise ValueError("every target position is ignored")
    logp = ag.log_softmax(rows(student_logits, keep))
    t = targets[keep]
    return -(logp[np.arange(len(t)), t]).mean()


def loss_kd(teacher_probs: Sequence[np.ndarray], student_logits: Tensor, mask=None, temperature=1.0) -> Tensor:
    """KL(mean teacher distribution || student distribution), averaged over rows."""
    _check_teachers(teacher_probs, student_logits)
    target = rows(np.mean(np.stack(teacher_probs), axis=0), mask)
    log_target = np.log(np.maximum(target, EPS))
    log_student = ag.log_softmax(rows(student_logits, mask) * (1.0 / temperature))
    terms = Tensor((target * log_target).astype(student_logits.data.dtype)) - log_student * target
    return terms.sum(axis=-1).mean()


def _norm(x: Tensor) -> Tensor:
    return ((x * x).sum(axis=-1) + EPS * EPS).sqrt()


def cosine_rows(a: Tensor, b: np.ndarray) -> Tensor:
    b = b.astype(a.data.dtype)
    b_norm = np.sqrt((b * b).sum(axis=-1) + EPS * EPS)
    return (a * Tensor(b)).sum(axis=-1) / (_norm(a) * Tensor(b_norm))


def loss_sim(teacher_logits: Sequence[np.ndarray], student_logits: Tensor, mask=None) -> Tensor:
    """Negative cosine similarity of logits, averaged over rows, summed over teachers."""
    _check_teachers(teacher_logits, student_logits)
    s = rows(student_logits, mask)
    total = None
    for v in teacher_logits:
        term = cosine_rows(s, rows(v, mask)).mean()
        total = term if total is None else total + term
    return -total


def loss_tp(teacher_probs: Sequence[np.ndarray], student_logits: Tensor, mask=None) -> Tensor:
    """Soft-label cross-entropy against each teacher's distribution, summed over teachers."""
    _check_teachers(teacher_probs, student_logits)
    logp = ag.log_softmax(rows(student_logits, mask))
    total = None
    for p in teacher_probs:
        target = Tensor(rows(p, mask).astype(logp.data.dtype))
        term = -(logp * target).sum(axis=-1).mean()
        total = term if total is None else total + term
    return total


def pairwise_distance(a: Tensor, b: Tensor, p_norm=2) -> Tensor:
    diff = a - b
    if p_norm == 2:
        return ((diff * diff).sum(axis=-1) + EPS ** 2).sqrt()
    return (diff.abs().pow(float(p_norm)).sum(axis=-1) + EPS ** p_norm).pow(1.0 / p_norm)


def loss_rel(student_pooled: Tensor, triplets, margin=0.2, p_norm=2) -> Tensor:
    """Mean triplet margin loss over the voted (anchor, positive, negative) triplets."""
    idx = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if len(idx) == 0:
        raise ValueError("no triplets")
    n = student_pooled.shape[0]
    if idx.min() < 0 or idx.max() >= n:
        raise ValueError("triplet index outside the batch")
    a = student_pooled[idx[:, 0]]
    pos = student_pooled[idx[:, 1]]
    neg = student_pooled[idx[:, 2]]
    gap = pairwise_distance(a, pos, p_norm) - pairwise_distance(a, neg, p_norm) + margin
    return gap.relu().mean()


# ---------------------------------------------------------------- combination

@dataclass(frozen=True)
class LossConfig:
    enabled: frozenset = frozenset({"kd", "sce", "sim", "rel"})
    margin: float = 0.2
    p_norm: int = 2
    temperature: float = 1.0
    vote_distance: str = "squared_euclidean"
    similarity: str = "cosine"

    def __post_init__(self):
        enabled = frozenset(str(n).lower() for n in self.enabled)
        object.__setattr__(self, "enabled", enabled)
        unknown = enabled - set(LOSS_NAMES)
        if unknown:
            raise ConfigError(f"unknown losses: {sorted(unknown)}")
        if not enabled:
            raise ConfigError("at least one loss must be enabled")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        if self.p_norm < 1:
            raise ConfigError("p_norm must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.vote_distance not in ("squared_euclidean", "euclidean"):
            raise ConfigError(f"unknown vote distance {self.vote_distance!r}")
        if self.similarity != "cosine":
            raise ConfigError(f"unknown similarity {self.similarity!r}")

    @classmethod
    def parse(cls, spec: str, **kw) -> "LossConfig":
        return cls(enabled=frozenset(s.strip() for s in spec.split(",") if s.strip()), **kw)

    def ordered(self) -> list[str]:
        return [n for n in LOSS_NAMES if n in self.enabled]

    def without(self, name: str) -> "LossConfig":
        return LossConfig(self.enabled - {name}, self.margin, self.p_norm, self.temperature,
                          self.vote_distance, self.similarity)


@dataclass
class LossBreakdown:
    components: dict = field(default_factory=dict)
    total: float = 0.0
    objective: Tensor | None = None

    def as_record(self) -> dict:
        return {**self.components, "total": self.total}


def total_loss(parts: Mapping[str, object], cfg: LossConfig) -> LossBreakdown:
    """Unweighted sum of the enabled components, in canonical order."""
    missing = [n for n in cfg.ordered() if n not in parts]
    if missing:
        raise ValueError(f"enabled losses not computed: {missing}")
    components, objective = {}, None
    for name in cfg.ordered():
        value = parts[name]
        scalar = float(value.data) if isinstance(value, Tensor) else float(value)
        if not np.isfinite(scalar):
            raise DivergenceError(f"loss component {name} is not finite ({scalar})")
        components[name] = scalar
        if isinstance(value, Tensor):
            objective = value if objective is None else objective + value
    return LossBreakdown(components, float(sum(components.values())), objective)
