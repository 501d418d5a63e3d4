"""Post-LN transformer encoder with per-task linear heads."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import EncodedBatch
from .errors import ConfigError, DivergenceError


class Task(str, Enum):
    ID = "ID"
    SF = "SF"
    DC = "DC"

    @classmethod
    def parse(cls, value) -> "Task":
        if isinstance(value, Task):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ConfigError(f"unknown task {value!r}; expected one of id, sf, dc") from None

    @property
    def per_token(self) -> bool:
        return self is Task.SF


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_hidden: int = 128
    d_ff: int = 256
    dropout: float = 0.1
    max_len: int = 512

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "n_heads", "d_hidden", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder {name} must be >= 1")
        if self.d_hidden % self.n_heads:
            raise ConfigError(f"d_hidden={self.d_hidden} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @classmethod
    def student(cls, vocab_size: int, max_len: int = 512) -> "EncoderConfig":
        """Full-size student: 6 layers, 8 heads, 768 hidden, 2048 FF, dropout 0.3."""
        return cls(vocab_size, n_layers=6, n_heads=8, d_hidden=768, d_ff=2048, dropout=0.3, max_len=max_len)

    @classmethod
    def teacher(cls, vocab_size: int, max_len: int = 512) -> "EncoderConfig":
        # Adam moves each weight by about lr per step, so at lr 5e-5 and three
        # epochs width is what buys fitting speed; 384 is the narrowest that
        # fits the reference corpus on every task.
        return cls(vocab_size, n_layers=2, n_heads=6, d_hidden=384, d_ff=1536, dropout=0.1, max_len=max_len)

    @classmethod
    def desk_student(cls, vocab_size: int, max_len: int = 512) -> "EncoderConfig":
        """Small student for single-core runs; keeps the 0.3 dropout."""
        return cls(vocab_size, n_layers=2, n_heads=4, d_hidden=128, d_ff=256, dropout=0.3, max_len=max_len)

    def to_dict(self) -> dict:
        return asdict(self)


class ForwardOutput(NamedTuple):
    hidden: Tensor
    pooled: Tensor
    logits: Tensor | None
    leaves: dict


def truncated_normal(rng, shape, std=0.02, dtype=np.float32):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def head_names(task: Task) -> tuple[str, str]:
    return f"head.{task.value}.weight", f"head.{task.value}.bias"


class Encoder:
    """Parameters live in ``self.params`` (name -> ndarray), in a fixed order."""

    def __init__(self, config: EncoderConfig, heads=None, *, seed=0, params=None, dtype=np.float32):
        self.config = config
        self.heads: dict[Task, int] = {}
        if params is not None:
            self.params = dict(params)
            for name, arr in self.params.items():
                if name.startswith("head.") and name.endswith(".bias"):
                    self.heads[Task(name.split(".")[1])] = arr.shape[0]
            return
        rng = np.random.default_rng(seed)
        c = config
        d = c.d_hidden
        p = {
            "embed.token": truncated_normal(rng, (c.vocab_size, d), dtype=dtype),
            "embed.position": truncated_normal(rng, (c.max_len, d), dtype=dtype),
            "embed.ln.gain": np.ones(d, dtype),
            "embed.ln.bias": np.zeros(d, dtype),
        }
        for i in range(c.n_layers):
            pre = f"layer{i}."
            for proj in ("q", "k", "v", "out"):
                p[f"{pre}attn.{proj}.weight"] = truncated_normal(rng, (d, d), dtype=dtype)
                p[f"{pre}attn.{proj}.bias"] = np.zeros(d, dtype)
            p[pre + "attn_ln.gain"] = np.ones(d, dtype)
            p[pre + "attn_ln.bias"] = np.zeros(d, dtype)
            p[pre + "ff.in.weight"] = truncated_normal(rng, (d, c.d_ff), dtype=dtype)
            p[pre + "ff.in.bias"] = np.zeros(c.d_ff, dtype)
            p[pre + "ff.out.weight"] = truncated_normal(rng, (c.d_ff, d), dtype=dtype)
            p[pre + "ff.out.bias"] = np.zeros(d, dtype)
            p[pre + "ff_ln.gain"] = np.ones(d, dtype)
            p[pre + "ff_ln.bias"] = np.zeros(d, dtype)
        self.params = p
        for task, k in (heads or {}).items():
            self.add_head(Task.parse(task), k, rng)

    # -- structure

    def add_head(self, task: Task, n_classes: int, rng=None):
        if n_classes < 1:
            raise ConfigError("a head needs at least one class")
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = self.params["embed.token"].dtype
        w, b = head_names(task)
        self.params[w] = truncated_normal(rng, (self.config.d_hidden, n_classes), dtype=dtype)
        self.params[b] = np.zeros(n_classes, dtype)
        self.heads[task] = n_classes

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("head.")]

    def n_parameters(self) -> int:
        return sum(a.size for a in self.params.values())

    @property
    def dtype(self):
        return self.params["embed.token"].dtype

    def astype(self, dtype) -> "Encoder":
        return Encoder(self.config, params={n: a.astype(dtype) for n, a in self.params.items()})

    def copy(self) -> "Encoder":
        return Encoder(self.config, params={n: a.copy() for n, a in self.params.items()})

    def freeze(self) -> "Encoder":
        for a in self.params.values():
            a.flags.writeable = False
        return self

    def digest(self, names=None) -> str:
        h = hashlib.sha256()
        for name in names or self.params:
            arr = np.ascontiguousarray(self.params[name])
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    # -- computation

    def forward(self, batch: EncodedBatch, task=None, *, train=False, rng=None, track=False) -> ForwardOutput:
        """Run the encoder on a batch.

        ``track`` selects which parameters are recorded on the tape: ``True``
        for all, a collection of names for a subset, ``False`` for none.
        Dropout is applied only when ``train`` is set, drawing from ``rng``.
        """
        c = self.config
        ids, mask = batch.token_ids, batch.mask
        n, length = ids.shape
        if length > c.max_len:
            raise ConfigError(f"batch width {length} exceeds max_len {c.max_len}")
        if ids.max() >= c.vocab_size or ids.min() < 0:
            raise ConfigError("token id outside the configured vocabulary")
        if task is not None:
            task = Task.parse(task)
            if task not in self.heads:
                raise ConfigError(f"model has no head for task {task.value}")
        if train and c.dropout > 0 and rng is None:
            raise ValueError("training mode with dropout needs an rng")

        if track is True:
            tracked = set(self.params)
        else:
            tracked = set(track or ())
        leaves = {name: Tensor(arr, requires_grad=name in tracked, name=name) for name, arr in self.params.items()}
        P = leaves
        dtype = self.dtype
        p_drop = c.dropout if train else 0.0

        def dropout(x):
            if p_drop == 0.0:
                return x
            keep = (rng.random(x.shape) >= p_drop).astype(dtype) / dtype.type(1.0 - p_drop)
            return x * Tensor(keep)

        pos = np.broadcast_to(np.arange(length), (n, length))
        x = ag.embedding(P["embed.token"], ids) + ag.embedding(P["embed.position"], pos)
        x = dropout(ag.layer_norm(x, P["embed.ln.gain"], P["embed.ln.bias"]))

        h, dh = c.n_heads, c.d_hidden // c.n_heads
        key_mask = mask.astype(bool)[:, None, None, :]
        scale = dtype.type(1.0 / np.sqrt(dh))
        for i in range(c.n_layers):
            pre = f"layer{i}."

            def proj(t, name):
                return t @ P[f"{pre}attn.{name}.weight"] + P[f"{pre}attn.{name}.bias"]

            def split(t):
                return t.reshape(n, length, h, dh).transpose(0, 2, 1, 3)

            q, k, v = split(proj(x, "q")), split(proj(x, "k")), split(proj(x, "v"))
            scores = (q @ k.transpose(0, 1, 3, 2)) * scale
            attn = dropout(ag.softmax(scores, axis=-1, mask=key_mask))
            ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(n, length, c.d_hidden)
            x = ag.layer_norm(x + dropout(proj(ctx, "out")), P[pre + "attn_ln.gain"], P[pre + "attn_ln.bias"])
            ff = ag.gelu(x @ P[pre + "ff.in.weight"] + P[pre + "ff.in.bias"])
            ff = ff @ P[pre + "ff.out.weight"] + P[pre + "ff.out.bias"]
            x = ag.layer_norm(x + dropout(ff), P[pre + "ff_ln.gain"], P[pre + "ff_ln.bias"])

        pooled = x[:, 0]
        logits = None
        if task is not None:
            w, b = head_names(task)
            feats = x if task.per_token else pooled
            logits = feats @ P[w] + P[b]
        return ForwardOutput(x, pooled, logits, leaves)

    def predict(self, batch: EncodedBatch, task) -> np.ndarray:
        """Argmax labels in eval mode: (N,) for ID/DC, (N, L) for SF."""
        out = self.forward(batch, task)
        return out.logits.data.argmax(axis=-1)


def gradients(loss: Tensor, leaves: dict) -> dict[str, np.ndarray]:
    """Backpropagate a scalar loss; every leaf gets a gradient (zeros if unreached)."""
    if not np.isfinite(loss.data).all():
        raise DivergenceError(f"non-finite loss {float(loss.data)!r}")
    for leaf in leaves.values():
        leaf.grad = None
    loss.backward()
    return {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in leaves.items()
    }
