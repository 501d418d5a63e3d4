"""Teacher-voted triplet relations.

For each of the N triplets in a batch, three distinct samples are drawn as
(anchor, positive, negative). Every teacher casts one vote in its own hidden
space: +1 if the anchor sits farther from the positive than from the
negative, otherwise -1 (ties count as -1). A strictly positive tally swaps
positive and negative. The returned indices address the student's hidden
states.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np


class TripletIndex(NamedTuple):
    anchor: int
    positive: int
    negative: int


def squared_euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.einsum("...i,...i->...", diff, diff)


def euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(squared_euclidean(a, b))


DISTANCES = {"squared_euclidean": squared_euclidean, "euclidean": euclidean}


def draw_indices(rng: np.random.Generator, n: int) -> np.ndarray:
    """One draw of three distinct batch positions. Both this module and any
    replay of it must consume the generator exactly this way."""
    return rng.choice(n, size=3, replace=False)


def generate_triplets(
    teacher_hiddens: Sequence[np.ndarray],
    rng: np.random.Generator,
    distance: str = "squared_euclidean",
    n: int | None = None,
) -> list[TripletIndex]:
    if not teacher_hiddens:
        raise ValueError("triplet voting needs at least one teacher")
    sizes = {h.shape[0] for h in teacher_hiddens}
    if len(sizes) != 1:
        raise ValueError(f"teacher hidden states disagree on batch size: {sorted(sizes)}")
    batch = sizes.pop()
    n = batch if n is None else n
    if batch < 3:
        raise ValueError(f"triplet voting needs a batch of at least 3, got {batch}")
    dist = DISTANCES[distance]

    draws = np.stack([draw_indices(rng, batch) for _ in range(n)])
    flag = np.zeros(n, dtype=np.int64)
    for h in teacher_hiddens:
        d12 = dist(h[draws[:, 0]], h[draws[:, 1]])
        d13 = dist(h[draws[:, 0]], h[draws[:, 2]])
        flag += np.where(d12 > d13, 1, -1)
    swap = flag > 0
    draws[swap, 1], draws[swap, 2] = draws[swap, 2], draws[swap, 1].copy()
    return [TripletIndex(int(a), int(p), int(q)) for a, p, q in draws]
