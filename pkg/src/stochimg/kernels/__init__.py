"""Hot Monte Carlo kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``STOCHIMG_NO_NUMBA=1`` to
force the numpy path; it is also used when numba is not installed. Both
backends return identical results for identical inputs.

Kernels
-------
uniforms(keys, counters)
    Matrix of counter-based uniforms, one row per stream key.
alias_pick(prob, alias, u)
    Map uniforms to indices through Vose alias tables.
simulate_trials(prob, alias, n_tx, k, threshold, per_packet,
                sampler_keys, loss_keys, loss_offset=0)
    Block-phase Monte Carlo. Returns a ``(trials, blocks)`` boolean matrix
    of blocks whose every fragment slot was filled. ``per_packet`` selects
    per-datagram drops (threshold = loss rate) versus one draw per block
    attempt (threshold = loss_rate ** k).
"""

import importlib
import os

import numpy as np

from . import _numpy

ENV_FLAG = "STOCHIMG_NO_NUMBA"


def _numba_requested():
    return os.environ.get(ENV_FLAG, "").strip().lower() not in ("1", "true", "yes", "on")


def _load_numba():
    try:
        return importlib.import_module(".kernels._numba", __package__.rpartition(".")[0])
    except ImportError:  # numba not installed
        return None


_numba = _load_numba() if _numba_requested() else None

BACKEND = "numba" if _numba is not None else "numpy"
_impl = _numba if _numba is not None else _numpy


def backend_module(name=None):
    """Return the kernel module for ``name`` ('numba', 'numpy' or the active one)."""
    if name is None:
        return _impl
    if name == "numpy":
        return _numpy
    if name == "numba":
        mod = _numba if _numba is not None else _load_numba()
        if mod is None:
            raise ImportError("numba is not installed")
        return mod
    raise ValueError(f"unknown kernel backend {name!r}")


def uniforms(keys, counters):
    return _impl.uniforms(np.asarray(keys, dtype=np.uint64),
                          np.asarray(counters, dtype=np.uint64))


def alias_pick(prob, alias, u):
    return _impl.alias_pick(prob, alias, np.asarray(u, dtype=np.float64))


def simulate_trials(prob, alias, n_tx, k, threshold, per_packet,
                    sampler_keys, loss_keys, loss_offset=0):
    return _impl.simulate_trials(
        np.ascontiguousarray(prob, dtype=np.float64),
        np.ascontiguousarray(alias, dtype=np.int64),
        int(n_tx), int(k), float(threshold), bool(per_packet),
        np.ascontiguousarray(sampler_keys, dtype=np.uint64),
        np.ascontiguousarray(loss_keys, dtype=np.uint64),
        int(loss_offset),
    )
