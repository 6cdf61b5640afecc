"""Vectorised numpy implementations of the hot kernels."""

import numpy as np

from ..rng import GAMMA, INV_2_53, MIX1, MIX2

_GAMMA = np.uint64(GAMMA)
_MIX1 = np.uint64(MIX1)
_MIX2 = np.uint64(MIX2)
_S11 = np.uint64(11)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S31 = np.uint64(31)
_ONE = np.uint64(1)

# Trials processed per chunk in simulate_trials; bounds peak memory.
CHUNK = 256


def uniforms(keys, counters):
    """Uniform draws for every (key, counter) pair, shape (len(keys), len(counters))."""
    keys = np.asarray(keys, dtype=np.uint64)
    counters = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = keys[:, None] + (counters[None, :] + _ONE) * _GAMMA
        z = (z ^ (z >> _S30)) * _MIX1
        z = (z ^ (z >> _S27)) * _MIX2
        z = z ^ (z >> _S31)
    return (z >> _S11).astype(np.float64) * INV_2_53


def alias_pick(prob, alias, u):
    n = prob.shape[0]
    x = u * n
    col = x.astype(np.int64)
    np.minimum(col, n - 1, out=col)
    frac = x - col
    return np.where(frac < prob[col], col, alias[col])


def simulate_trials(prob, alias, n_tx, k, threshold, per_packet,
                    sampler_keys, loss_keys, loss_offset=0):
    n_blocks = prob.shape[0]
    n_trials = sampler_keys.shape[0]
    received = np.zeros((n_trials, n_blocks), dtype=np.bool_)
    tx = np.arange(n_tx, dtype=np.uint64)
    for lo in range(0, n_trials, CHUNK):
        hi = min(lo + CHUNK, n_trials)
        rows = hi - lo
        blocks = alias_pick(prob, alias, uniforms(sampler_keys[lo:hi], tx))
        trial = np.repeat(np.arange(rows), n_tx).reshape(rows, n_tx)
        if not per_packet:
            ok = uniforms(loss_keys[lo:hi], tx + np.uint64(loss_offset)) >= threshold
            received[trial[ok] + lo, blocks[ok]] = True
            continue
        units = np.arange(n_tx * k, dtype=np.uint64) + np.uint64(loss_offset)
        ok = (uniforms(loss_keys[lo:hi], units) >= threshold).reshape(rows, n_tx, k)
        slots = np.zeros((rows, n_blocks, k), dtype=np.bool_)
        for f in range(k):
            hit = ok[:, :, f]
            slots[trial[hit], blocks[hit], f] = True
        received[lo:hi] = slots.all(axis=2)
    return received
