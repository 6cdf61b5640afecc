"""numba-compiled implementations of the hot kernels.

Loop-for-loop equivalents of ``_numpy``; every intermediate is kept in
uint64 because numba promotes mixed uint64/int64 arithmetic to float64.
"""

import numpy as np
from numba import njit

from ..rng import GAMMA, INV_2_53, MIX1, MIX2

_GAMMA = np.uint64(GAMMA)
_MIX1 = np.uint64(MIX1)
_MIX2 = np.uint64(MIX2)
_S11 = np.uint64(11)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S31 = np.uint64(31)
_ONE = np.uint64(1)


@njit(cache=True, inline="always")
def _uniform(key, counter):
    z = key + (counter + _ONE) * _GAMMA
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    z = z ^ (z >> _S31)
    return np.float64(z >> _S11) * INV_2_53


@njit(cache=True, inline="always")
def _pick(prob, alias, u):
    n = prob.shape[0]
    x = u * n
    col = np.int64(x)
    if col > n - 1:
        col = n - 1
    if x - col < prob[col]:
        return col
    return alias[col]


@njit(cache=True)
def uniforms(keys, counters):
    out = np.empty((keys.shape[0], counters.shape[0]), dtype=np.float64)
    for i in range(keys.shape[0]):
        key = np.uint64(keys[i])
        for j in range(counters.shape[0]):
            out[i, j] = _uniform(key, np.uint64(counters[j]))
    return out


@njit(cache=True)
def alias_pick(prob, alias, u):
    out = np.empty(u.shape, dtype=np.int64)
    flat_u = u.ravel()
    flat_out = out.ravel()
    for i in range(flat_u.shape[0]):
        flat_out[i] = _pick(prob, alias, flat_u[i])
    return out


@njit(cache=True)
def simulate_trials(prob, alias, n_tx, k, threshold, per_packet,
                    sampler_keys, loss_keys, loss_offset=0):
    n_blocks = prob.shape[0]
    n_trials = sampler_keys.shape[0]
    received = np.zeros((n_trials, n_blocks), dtype=np.bool_)
    full = (np.int64(1) << k) - 1
    masks = np.zeros(n_blocks, dtype=np.int64)
    offset = np.uint64(loss_offset)
    for t in range(n_trials):
        skey = np.uint64(sampler_keys[t])
        lkey = np.uint64(loss_keys[t])
        if per_packet:
            masks[:] = 0
        for s in range(n_tx):
            b = _pick(prob, alias, _uniform(skey, np.uint64(s)))
            if not per_packet:
                if _uniform(lkey, np.uint64(s) + offset) >= threshold:
                    received[t, b] = True
                continue
            base = np.uint64(s) * np.uint64(k) + offset
            for f in range(k):
                if _uniform(lkey, base + np.uint64(f)) >= threshold:
                    masks[b] |= np.int64(1) << f
        if per_packet:
            for b in range(n_blocks):
                received[t, b] = masks[b] == full
    return received
