"""Central finite-difference verification of the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from .corpus import CLS_ID, IGNORE_INDEX, PAD_ID, EncodedBatch
from .encoder import Encoder, EncoderConfig, Task, gradients
from .triplets import generate_triplets


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    n_coords: int
    worst: tuple

    @property
    def ok(self) -> bool:
        return self.max_rel_err < 1e-4


GRAD_FLOOR = 1e-7


def relative_error(analytic: float, numeric: float, floor: float = GRAD_FLOOR) -> float:
    """|a - n| / max(|a|, |n|, floor). The floor keeps structurally zero
    gradients (e.g. the key bias under softmax shift invariance), where both
    routes return roundoff near 1e-12, from reading as 100% error."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(objective, model: Encoder, *, n_coords=100, eps=1e-3, seed=0, name="loss", points=5):
    """Compare ``gradients(objective(model, track=True))`` against central
    differences at ``n_coords`` random parameter coordinates.

    ``objective(model, track)`` returns a scalar tensor and the tape leaves.
    The model should hold float64 parameters. ``points`` selects the
    symmetric stencil: 3 gives the classic (f(x+e) - f(x-e)) / 2e with
    O(e^2) truncation, 5 the O(e^4) stencil at the same step.
    """
    rng = np.random.default_rng(seed)
    loss, leaves = objective(model, True)
    grads = gradients(loss, leaves)
    names = list(model.params)
    worst, worst_err = None, 0.0
    for _ in range(n_coords):
        pname = names[int(rng.integers(len(names)))]
        arr = model.params[pname]
        flat = int(rng.integers(arr.size))
        pos = np.unravel_index(flat, arr.shape)
        orig = arr[pos]

        def at(offset):
            arr[pos] = orig + offset
            return float(objective(model, False)[0].data)

        if points == 3:
            numeric = (at(eps) - at(-eps)) / (2 * eps)
        elif points == 5:
            numeric = (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
        else:
            raise ValueError("points must be 3 or 5")
        arr[pos] = orig
        analytic = float(grads[pname][pos])
        err = relative_error(analytic, numeric)
        if err >= worst_err:
            worst_err, worst = err, (pname, tuple(int(i) for i in pos), analytic, numeric)
    return GradCheckResult(name, worst_err, n_coords, worst)


def tiny_setup(seed=0, spread=0.1, embed_scale=1.0, head_scale=0.6, d_hidden=16, n_teachers=3, n=6, width=7, vocab_size=20, k=(5, 4, 3)):
    """A 1-layer float64 encoder with all three heads, one padded batch and
    random frozen teacher signals for every task."""
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(vocab_size, n_layers=1, n_heads=2, d_hidden=d_hidden, d_ff=2 * d_hidden,
                        dropout=0.0, max_len=16)
    heads = {Task.SF: k[0], Task.ID: k[1], Task.DC: k[2]}
    model = Encoder(cfg, heads, seed=seed, dtype=np.float64)
    # Move away from the 0.02 init: embeddings at unit scale (LayerNorm
    # amplifies curvature by 1/std of its input, which at init makes a 1e-3
    # step a ~5% perturbation), everything else spread by ``spread``.
    for name, arr in model.params.items():
        if name.startswith("embed.") and name != "embed.ln.bias":
            scale = embed_scale
        elif name.startswith("head."):
            scale = head_scale
        else:
            scale = spread
        arr += rng.normal(scale=scale, size=arr.shape)

    lengths = rng.integers(2, width, size=n)
    lengths[0] = width - 1
    ids = np.full((n, width), PAD_ID, dtype=np.int64)
    mask = np.zeros((n, width), dtype=np.int64)
    slots = np.full((n, width), IGNORE_INDEX, dtype=np.int64)
    for i, ln in enumerate(lengths):
        ids[i, 0] = CLS_ID
        ids[i, 1:ln + 1] = rng.integers(3, vocab_size, size=ln)
        mask[i, :ln + 1] = 1
        slots[i, 1:ln + 1] = rng.integers(0, k[0], size=ln)
    batch = EncodedBatch(ids, mask, slots, rng.integers(0, k[1], size=n), rng.integers(0, k[2], size=n))

    signals = {}
    for task, kk in heads.items():
        shape = (n, width, kk) if task.per_token else (n, kk)
        logits = [rng.normal(scale=2.0, size=shape) for _ in range(n_teachers)]
        probs = [np.exp(v - v.max(-1, keepdims=True)) for v in logits]
        probs = [p / p.sum(-1, keepdims=True) for p in probs]
        signals[task] = (logits, probs)
    hiddens = [rng.normal(size=(n, w)) for w in (16, 32, 16)[:n_teachers]]
    triplets = generate_triplets(hiddens, rng)
    return model, batch, signals, triplets


def loss_objectives(batch, signals, triplets, task: Task, cfg=L.LossConfig()):
    mask = batch.token_mask if task.per_token else None
    logits_t, probs_t = signals[task]

    def make(kind):
        def objective(model, track):
            out = model.forward(batch, task, track=track)
            if kind == "kd":
                loss = L.loss_kd(probs_t, out.logits, mask, cfg.temperature)
            elif kind == "sce":
                loss = L.loss_sce(out.logits, batch.targets(task), mask)
            elif kind == "sim":
                loss = L.loss_sim(logits_t, out.logits, mask)
            elif kind == "rel":
                loss = L.loss_rel(out.pooled, triplets, cfg.margin, cfg.p_norm)
            elif kind == "tp":
                loss = L.loss_tp(probs_t, out.logits, mask)
            else:
                parts = {
                    "kd": L.loss_kd(probs_t, out.logits, mask, cfg.temperature),
                    "sce": L.loss_sce(out.logits, batch.targets(task), mask),
                    "sim": L.loss_sim(logits_t, out.logits, mask),
                    "rel": L.loss_rel(out.pooled, triplets, cfg.margin, cfg.p_norm),
                    "tp": L.loss_tp(probs_t, out.logits, mask),
                }
                loss = L.total_loss(parts, L.LossConfig(frozenset(L.LOSS_NAMES))).objective
            return loss, out.leaves

        return objective

    return {kind: make(kind) for kind in (*L.LOSS_NAMES, "total")}


def run_suite(n_coords=100, eps=1e-3, seed=0, tasks=(Task.ID, Task.SF), points=5) -> list[GradCheckResult]:
    """Gradient check of every loss (and their sum) on a tiny model, per task."""
    model, batch, signals, triplets = tiny_setup(seed)
    results = []
    for task in tasks:
        for kind, objective in loss_objectives(batch, signals, triplets, task).items():
            results.append(
                check_gradients(objective, model, n_coords=n_coords, eps=eps, seed=seed,
                                name=f"{kind}[{task.value}]", points=points)
            )
    return results
