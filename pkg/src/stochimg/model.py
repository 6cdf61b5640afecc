"""Transmission-planning model.

Value maps and transmission probabilities, byte budgets and transmission
counts, per-block arrival probabilities, the inverse problem (minimum
transmission probability for a required arrival probability) and the
feasibility constraint on a whole set of requirements.

All probability math is float64. Powers of the form ``(1 - x) ** (1 / N)``
and ``(1 - x) ** N`` go through ``log1p``/``expm1`` so that they stay
accurate for large ``N`` and for ``x`` close to 0 or 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Absolute slack tolerated by the feasibility test. Only absorbs rounding at
# exact boundaries such as R = [0.5, 0.5], N = 1.
FEASIBILITY_TOL = 1e-12

DEFAULT_HEATMAP_FLOOR = 0.01


class ModelError(ValueError):
    """Invalid input to a planning function."""


class DegenerateValueMap(ModelError):
    pass


class NegativeValue(ModelError):
    pass


class IndivisibleSizes(ModelError):
    pass


class EmptyBudget(ModelError):
    pass


class ChannelDeliversNothing(ModelError):
    pass


class UnattainableRequirement(ModelError):
    pass


class InfeasibleRequirements(ModelError):
    def __init__(self, report: FeasibilityReport):
        super().__init__(
            f"infeasible requirements: sum (1-R)^(1/N) = {report.lhs:.12g} "
            f"< |I| - 1 + L^K = {report.rhs:.12g} (slack {report.slack:.3g})"
        )
        self.report = report


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _check_count(name: str, value: int) -> int:
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ModelError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def _check_prob(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ModelError(f"{name} must lie in [0, 1], got {value!r}")
    return value


@dataclass(frozen=True)
class BlockIndexSet:
    """Dense block identifiers ``0 .. count - 1``."""

    count: int

    def __post_init__(self):
        _check_count("block count", self.count)

    def __len__(self):
        return self.count

    def __iter__(self):
        return iter(range(self.count))


@dataclass(frozen=True)
class ChannelParams:
    loss_rate: float
    packet_size: int

    def __post_init__(self):
        _check_prob("loss_rate", self.loss_rate)
        _check_count("packet_size", self.packet_size)


@dataclass(frozen=True)
class SizingParams:
    block_size: int
    original_size: int
    transmit_size: float

    def __post_init__(self):
        _check_count("block_size", self.block_size)
        _check_count("original_size", self.original_size)
        if not self.transmit_size > 0:
            raise ModelError(f"transmit_size must be positive, got {self.transmit_size!r}")

    @classmethod
    def from_ratio(cls, block_count: int, block_size: int, ratio: float) -> SizingParams:
        """Sizing for a budget expressed as a multiple of the original size."""
        original = block_count * block_size
        return cls(block_size, original, ratio * original)


@dataclass(frozen=True, eq=False)
class ValueMap:
    values: np.ndarray
    probabilities: np.ndarray

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class Requirements:
    required_reception: np.ndarray

    def __init__(self, required_reception):
        r = _frozen(required_reception)
        if r.ndim != 1 or r.size == 0:
            raise ModelError("requirements must be a non-empty 1-D sequence")
        if np.any(~np.isfinite(r)) or np.any(r < 0):
            raise ModelError("required reception probabilities must be >= 0")
        if np.any(r >= 1):
            raise UnattainableRequirement(
                "unattainable requirement: R_i = 1 cannot be met with finite N under loss")
        object.__setattr__(self, "required_reception", r)

    def __len__(self):
        return len(self.required_reception)


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    lhs: float
    rhs: float
    slack: float


@dataclass(frozen=True, eq=False)
class TransmissionPlan:
    channel: ChannelParams
    sizing: SizingParams
    value_map: ValueMap
    block_count: int
    total_transmissions: int
    fragments_per_block: int
    expected_counts: np.ndarray
    arrival_probs: np.ndarray
    block_success: float = field(default=float("nan"))

    @property
    def probabilities(self) -> np.ndarray:
        return self.value_map.probabilities

    @property
    def realized_transmit_size(self) -> int:
        return self.total_transmissions * self.sizing.block_size


# ---------------------------------------------------------------------------
# value maps


def normalize_values(values) -> ValueMap:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ModelError("values must be a non-empty 1-D sequence")
    if np.any(~np.isfinite(v)):
        raise ModelError("values must be finite")
    if np.any(v < 0):
        raise NegativeValue(f"negative value at block {int(np.argmax(v < 0))}")
    total = v.sum()
    if not total > 0:
        raise DegenerateValueMap("degenerate value map: all values are zero")
    return ValueMap(_frozen(v), _frozen(v / total))


def uniform_values(count: int) -> ValueMap:
    return normalize_values(np.ones(_check_count("block count", count)))


def values_from_heatmap(frequencies, floor: float = DEFAULT_HEATMAP_FLOOR) -> ValueMap:
    """Values proportional to per-block appearance counts.

    Every block is lifted to at least ``floor * max(frequencies)`` so that
    cells never seen in the heatmap keep a small transmission chance.
    """
    f = np.asarray(frequencies, dtype=np.float64)
    if f.ndim != 1 or f.size == 0:
        raise ModelError("frequencies must be a non-empty 1-D sequence")
    if np.any(f < 0):
        raise NegativeValue("negative frequency")
    if floor < 0:
        raise ModelError("floor must be non-negative")
    return normalize_values(np.maximum(f, floor * f.max()))


# ---------------------------------------------------------------------------
# budget


def transmission_count(block_count: int, original_size: int, transmit_size: float) -> int:
    """N = |I| * S_prp / S_org rounded half-up; raises EmptyBudget below 1."""
    exact = block_count * transmit_size / original_size
    n = math.floor(exact + 0.5)
    if n < 1:
        raise EmptyBudget(f"empty budget: transmit size {transmit_size!r} gives N = {exact:.3g}")
    return n


def fragments_per_block(block_size: int, packet_size: int) -> int:
    if block_size % packet_size:
        raise IndivisibleSizes(
            f"block size {block_size} is not a multiple of packet size {packet_size}")
    return block_size // packet_size


def plan_transmission(channel: ChannelParams, sizing: SizingParams,
                      value_map: ValueMap, block_set: BlockIndexSet) -> TransmissionPlan:
    n_blocks = block_set.count
    if len(value_map) != n_blocks:
        raise ModelError(f"value map has {len(value_map)} entries for {n_blocks} blocks")
    if sizing.original_size != n_blocks * sizing.block_size:
        raise ModelError(
            f"original size {sizing.original_size} != {n_blocks} blocks x {sizing.block_size} bytes")
    k = fragments_per_block(sizing.block_size, channel.packet_size)
    n = transmission_count(n_blocks, sizing.original_size, sizing.transmit_size)
    p = value_map.probabilities
    return TransmissionPlan(
        channel=channel,
        sizing=sizing,
        value_map=value_map,
        block_count=n_blocks,
        total_transmissions=n,
        fragments_per_block=k,
        expected_counts=_frozen(p * n),
        arrival_probs=_frozen(arrival_probability(p, channel.loss_rate, k, n)),
        block_success=block_success_prob(channel.loss_rate, k),
    )


def make_plan(value_map: ValueMap, block_size: int, packet_size: int,
              ratio: float, loss_rate: float) -> TransmissionPlan:
    """Shortcut for the common case of a budget given as S_prp / S_org."""
    n_blocks = len(value_map)
    return plan_transmission(
        ChannelParams(loss_rate, packet_size),
        SizingParams.from_ratio(n_blocks, block_size, ratio),
        value_map,
        BlockIndexSet(n_blocks),
    )


# ---------------------------------------------------------------------------
# arrival model


def _loss_pow(loss_rate: float, k: int) -> float:
    return float(loss_rate) ** int(k)


def block_success_prob(loss_rate: float, fragments: int) -> float:
    """Success probability of one block attempt, ``1 - L**K``.

    This is the model's block-level loss law taken literally. Per-fragment
    reassembly of K independently lost packets would instead succeed with
    ``(1 - L)**K``; see :func:`arrival_probability_fragments`.
    """
    loss_rate = _check_prob("loss_rate", loss_rate)
    k = _check_count("fragments", fragments)
    if loss_rate == 0.0:
        return 1.0
    return float(-math.expm1(k * math.log(loss_rate)))


def _survive_pow(x, n):
    """(1 - x) ** n for x in [0, 1], accurate for small x and large n."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.exp(n * np.log1p(-x))


def arrival_probability(p, loss_rate: float, k: int, n: int):
    """Probability a block with transmission probability ``p`` arrives at least once.

    ``1 - ((1 - p) + p * L**K) ** N``. Accepts a scalar or an array of ``p``.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any((p_arr < 0) | (p_arr > 1)):
        raise ModelError("transmission probability must lie in [0, 1]")
    r = block_success_prob(loss_rate, k)
    n = _check_count("N", n)
    with np.errstate(divide="ignore"):
        rho = -np.expm1(n * np.log1p(-p_arr * r))
    return float(rho) if rho.ndim == 0 else rho


def arrival_probability_attempts(p, loss_rate: float, k: int, n: int):
    """Arrival probability if a block only counts when one attempt delivers all K packets."""
    p_arr = np.asarray(p, dtype=np.float64)
    r = (1.0 - _check_prob("loss_rate", loss_rate)) ** _check_count("K", k)
    with np.errstate(divide="ignore"):
        rho = -np.expm1(_check_count("N", n) * np.log1p(-p_arr * r))
    return float(rho) if rho.ndim == 0 else rho


def arrival_probability_fragments(p, loss_rate: float, k: int, n: int):
    """Arrival probability under per-packet loss with fragment slots merged across attempts.

    A block with M attempts is complete when each of its K fragment slots
    got through at least once, probability ``(1 - L**M) ** K``. Averaging
    over ``M ~ Binomial(N, p)`` gives

        sum_j C(K, j) (-1)**j (1 - p (1 - L**j)) ** N.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    loss_rate = _check_prob("loss_rate", loss_rate)
    k = _check_count("K", k)
    n = _check_count("N", n)
    rho = np.zeros_like(p_arr)
    for j in range(1, k + 1):
        term = _survive_pow(p_arr * (1.0 - loss_rate ** j), n)
        rho += (-1) ** (j + 1) * math.comb(k, j) * (1.0 - term)
    return float(rho) if rho.ndim == 0 else rho


# ---------------------------------------------------------------------------
# requirements


def _root_n(r, n):
    """(1 - r) ** (1 / n), computed in log space."""
    with np.errstate(divide="ignore"):
        return np.exp(np.log1p(-np.asarray(r, dtype=np.float64)) / n)


def min_probability_for(requirement: float, loss_rate: float, k: int, n: int) -> float:
    """Smallest transmission probability meeting ``arrival >= requirement``.

    The result can exceed 1 when the requirement is out of reach for this
    budget; callers that need a probability should check feasibility.
    """
    req = float(requirement)
    if req >= 1.0:
        raise UnattainableRequirement("unattainable requirement: R = 1")
    if req < 0.0:
        raise ModelError("requirement must be >= 0")
    r = block_success_prob(loss_rate, k)
    if r == 0.0:
        raise ChannelDeliversNothing("channel delivers nothing: L^K = 1")
    n = _check_count("N", n)
    if req == 0.0:
        return 0.0
    return float(-math.expm1(math.log1p(-req) / n) / r)


def feasibility_check(requirements: Requirements, loss_rate: float,
                      k: int, n: int) -> FeasibilityReport:
    """Test ``sum_i (1 - R_i)**(1/N) >= |I| - 1 + L**K``."""
    r = requirements.required_reception
    n = _check_count("N", n)
    lhs = float(np.sum(_root_n(r, n)))
    rhs = float(r.size - 1 + _loss_pow(_check_prob("loss_rate", loss_rate), _check_count("K", k)))
    slack = lhs - rhs
    return FeasibilityReport(slack >= -FEASIBILITY_TOL, lhs, rhs, slack)


def values_from_requirements(requirements: Requirements, loss_rate: float,
                             k: int, n: int) -> ValueMap:
    """Value map whose every block meets its required arrival probability.

    Each block first receives its minimum probability; the surplus
    ``1 - sum(minima)`` is shared in proportion to those minima, or uniformly
    when every requirement is zero.
    """
    report = feasibility_check(requirements, loss_rate, k, n)
    if not report.feasible:
        raise InfeasibleRequirements(report)
    r_blk = block_success_prob(loss_rate, k)
    if r_blk == 0.0:
        raise ChannelDeliversNothing("channel delivers nothing: L^K = 1")
    minima = -np.expm1(np.log1p(-requirements.required_reception) / n) / r_blk
    if not minima.sum() > 0:
        return uniform_values(len(requirements))
    return normalize_values(minima)


# ---------------------------------------------------------------------------
# region coverage


def full_coverage_independent(arrival_probs) -> float:
    """Product of per-block arrival probabilities (treats blocks as independent)."""
    return float(np.prod(np.asarray(arrival_probs, dtype=np.float64)))


def _lgamma(x):
    return np.array([math.lgamma(v) for v in np.ravel(x)]).reshape(np.shape(x))


def full_coverage_exact(success_probs, n: int) -> float:
    """Probability that N i.i.d. attempts deliver every block of a region.

    ``success_probs[i]`` is the per-attempt probability that block ``i`` is
    chosen and delivered. Counts the sequences in which every region block
    occurs at least once through the exponential generating function

        N! [x**N] exp(q_0 x) * prod_i (exp(q_i x) - 1),   q_0 = 1 - sum q_i,

    evaluated in log space with binomial convolutions. All terms are
    non-negative so nothing cancels. Cost is O(len(region) * N**2).
    """
    q = np.asarray(success_probs, dtype=np.float64)
    n = _check_count("N", n)
    if q.size == 0:
        return 1.0
    if q.size > n:
        return 0.0
    q_other = max(0.0, 1.0 - float(q.sum()))
    idx = np.arange(n + 1)
    lfact = _lgamma(idx + 1.0)
    ln_binom = lfact[:, None] - lfact[None, :] - lfact[np.maximum(idx[:, None] - idx[None, :], 0)]
    lower = idx[None, :] <= idx[:, None]
    diff = np.maximum(idx[:, None] - idx[None, :], 0)

    with np.errstate(divide="ignore"):
        acc = idx * math.log(q_other) if q_other > 0 else np.where(idx == 0, 0.0, -np.inf)
        for qi in q:
            if qi <= 0:
                return 0.0
            f = idx * math.log(qi)
            f[0] = -np.inf
            terms = np.where(lower, ln_binom + acc[None, :] + f[diff], -np.inf)
            peak = terms.max(axis=1)
            safe = np.where(np.isfinite(peak), peak, 0.0)
            acc = np.where(np.isfinite(peak),
                           safe + np.log(np.exp(terms - safe[:, None]).sum(axis=1)),
                           -np.inf)
    return float(min(1.0, math.exp(acc[n])))
