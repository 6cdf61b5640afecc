import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochimg import kernels
from stochimg.rng import uniform
from stochimg.sampler import build_alias

try:
    NUMBA = kernels.backend_module("numba")
except ImportError:
    NUMBA = None

BACKENDS = ["numpy"] + (["numba"] if NUMBA is not None else [])


def reference_trials(prob, alias, n_tx, k, threshold, per_packet, skeys, lkeys, offset):
    """Plain-Python loop over the same streams."""
    n = prob.size
    out = np.zeros((len(skeys), n), dtype=bool)
    for t, (sk, lk) in enumerate(zip(skeys, lkeys)):
        masks = [0] * n
        for a in range(n_tx):
            x = uniform(sk, a) * n
            col = min(int(x), n - 1)
            b = col if x - col < prob[col] else int(alias[col])
            if per_packet:
                for f in range(k):
                    if uniform(lk, a * k + f + offset) >= threshold:
                        masks[b] |= 1 << f
            elif uniform(lk, a + offset) >= threshold:
                masks[b] = (1 << k) - 1
        out[t] = [m == (1 << k) - 1 for m in masks]
    return out


def random_case(rng, n_blocks, trials):
    p = rng.random(n_blocks) ** 3
    p[rng.random(n_blocks) < 0.2] = 0
    if p.sum() == 0:
        p[0] = 1
    prob, alias = build_alias(p / p.sum())
    skeys = rng.integers(0, 2**63, size=trials, dtype=np.uint64) * np.uint64(2)
    lkeys = rng.integers(0, 2**63, size=trials, dtype=np.uint64) + np.uint64(7)
    return prob, alias, skeys, lkeys


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("per_packet,k", [(False, 1), (False, 3), (True, 1), (True, 4)])
def test_backend_matches_reference_loop(backend, per_packet, k):
    rng = np.random.default_rng(k + 10 * per_packet)
    prob, alias, skeys, lkeys = random_case(rng, 12, 5)
    loss = 0.3
    thr = loss if per_packet else loss ** k
    mod = kernels.backend_module(backend)
    got = mod.simulate_trials(prob, alias, 40, k, thr, per_packet, skeys, lkeys, 3)
    ref = reference_trials(prob, alias, 40, k, thr, per_packet, skeys.tolist(),
                           lkeys.tolist(), 3)
    assert np.array_equal(got, ref)


@pytest.mark.skipif(NUMBA is None, reason="numba not installed")
@settings(max_examples=30)
@given(st.integers(1, 40), st.integers(1, 300), st.integers(1, 5), st.floats(0, 1),
       st.booleans(), st.integers(0, 2**32), st.integers(0, 50))
def test_numba_and_numpy_agree(n_blocks, n_tx, k, loss, per_packet, seed, offset):
    rng = np.random.default_rng(seed)
    prob, alias, skeys, lkeys = random_case(rng, n_blocks, 7)
    thr = loss if per_packet else loss ** k
    a = kernels.backend_module("numpy").simulate_trials(
        prob, alias, n_tx, k, thr, per_packet, skeys, lkeys, offset)
    b = NUMBA.simulate_trials(prob, alias, n_tx, k, thr, per_packet, skeys, lkeys, offset)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("backend", BACKENDS)
def test_uniforms_and_alias_pick_backends(backend):
    mod = kernels.backend_module(backend)
    keys = np.array([3, 2**64 - 1], dtype=np.uint64)
    counters = np.arange(100, dtype=np.uint64)
    mat = mod.uniforms(keys, counters)
    assert mat[1, 5] == uniform(2**64 - 1, 5)
    prob, alias = build_alias(np.array([0.2, 0.0, 0.8]))
    picks = mod.alias_pick(prob, alias, mat[0])
    assert set(np.unique(picks).tolist()) <= {0, 2}


def test_large_chunked_run_matches_small_runs():
    rng = np.random.default_rng(3)
    prob, alias, skeys, lkeys = random_case(rng, 20, 600)
    full = kernels.simulate_trials(prob, alias, 50, 2, 0.2, True, skeys, lkeys)
    part = kernels.simulate_trials(prob, alias, 50, 2, 0.2, True, skeys[300:], lkeys[300:])
    assert np.array_equal(full[300:], part)


def test_env_flag_forces_numpy_backend():
    env = dict(os.environ, STOCHIMG_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c",
                          "from stochimg import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


@pytest.mark.skipif(os.environ.get("STOCHIMG_NO_NUMBA"), reason="backend forced by env")
def test_default_backend_reports_numba_when_available():
    assert kernels.BACKEND == ("numba" if NUMBA is not None else "numpy")
    with pytest.raises(ValueError):
        kernels.backend_module("cuda")
