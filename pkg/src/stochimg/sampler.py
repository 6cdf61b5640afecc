"""Weighted block sampler (Vose alias method over a counter-based stream)."""

from __future__ import annotations

import numpy as np

from . import kernels
from .rng import uniform


def build_alias(probabilities) -> tuple[np.ndarray, np.ndarray]:
    """Vose alias tables ``(prob, alias)`` for a probability vector.

    Zero-probability entries are guaranteed never to be returned, even when
    rounding leaves residue in the work lists.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    n = p.size
    if n == 0:
        raise ValueError("empty probability vector")
    if np.any(p < 0) or not p.sum() > 0:
        raise ValueError("probabilities must be non-negative with a positive sum")
    scaled = p * (n / p.sum())
    prob = np.zeros(n)
    alias = np.arange(n, dtype=np.int64)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    work = scaled.tolist()
    while small and large:
        s = small.pop()
        g = large.pop()
        prob[s] = work[s]
        alias[s] = g
        work[g] = (work[g] + work[s]) - 1.0
        (small if work[g] < 1.0 else large).append(g)
    fallback = int(np.argmax(p))
    for i in large + small:
        if p[i] > 0:
            prob[i] = 1.0
        else:
            prob[i] = 0.0
            alias[i] = fallback
    return prob, alias


class AliasSampler:
    """Draws block ids i.i.d. with probability ``p_i``.

    Draw ``t`` uses ``uniform(key, t)``, so a sampler built from the same
    probabilities and key always yields the same sequence.
    """

    def __init__(self, probabilities, key: int, start: int = 0):
        self.prob, self.alias = build_alias(probabilities)
        self.key = int(key)
        self.counter = start

    def __len__(self):
        return self.prob.size

    def draw(self) -> int:
        u = uniform(self.key, self.counter)
        self.counter += 1
        n = self.prob.size
        x = u * n
        col = min(int(x), n - 1)
        if x - col < self.prob[col]:
            return col
        return int(self.alias[col])

    def draw_many(self, count: int) -> np.ndarray:
        counters = np.arange(self.counter, self.counter + count, dtype=np.uint64)
        u = kernels.uniforms(np.array([self.key], dtype=np.uint64), counters)[0]
        self.counter += count
        return kernels.alias_pick(self.prob, self.alias, u)


def sample_block(sampler: AliasSampler) -> int:
    return sampler.draw()
