"""Monte Carlo sweeps over loss rates and budgets.

Each sweep cell (loss, ratio) runs ``trials`` independent sessions. Trial
``t`` of a cell is seeded with ``derive_key(master_seed, loss, ratio, t)``,
so cells can run in any order, or in parallel, without changing a result.

Two engines produce identical per-trial outcomes for the same seed:

``protocol``  full sender/receiver state machines over simulated channels.
``kernel``    the vectorised block-phase kernel (numba or numpy), which
              replays the same sampler and loss streams without building
              packets. It models an established session: agreement runs on
              a lossless control path, as in ``protocol`` with
              ``lossy_agreement=False``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import formats, kernels
from .channel import ChannelMode
from .image import (BlockGrid, BlockPayload, ImageBuffer, ImageError, PartialImage,
                    read_image, reassemble, received_from_pixels, region_coverage, tile, write_image)
from .model import (DEFAULT_HEATMAP_FLOOR, ModelError, Requirements, TransmissionPlan,
                    arrival_probability_attempts, arrival_probability_fragments,
                    full_coverage_exact, full_coverage_independent, make_plan,
                    normalize_values, transmission_count, uniform_values,
                    values_from_heatmap, values_from_requirements, fragments_per_block)
from .protocol import (AgreementFailed, DEFAULT_GUARD_INTERVALS, DEFAULT_INTERVAL_US,
                       run_simulated_session, trial_stream_keys)
from .rng import derive_key
from .sampler import build_alias

DEFAULT_SIGMA = 0.125
DEFAULT_TRIALS = 1000


class SpecError(ValueError):
    pass


# ---------------------------------------------------------------------------
# synthetic inputs


def gaussian_heatmap(cols: int, rows: int, sigma: float = DEFAULT_SIGMA,
                     peak: int = 1000, center: Optional[tuple[float, float]] = None
                     ) -> np.ndarray:
    """Integer appearance counts shaped as a 2-D Gaussian over the block grid.

    ``sigma`` is a fraction of the grid width/height; ``center`` is in block
    units and defaults to the middle of the grid. Row-major, like block ids.
    """
    cx, cy = center if center is not None else (cols / 2, rows / 2)
    x = np.arange(cols) + 0.5
    y = np.arange(rows) + 0.5
    sx, sy = sigma * cols, sigma * rows
    g = np.exp(-0.5 * (((x[None, :] - cx) / sx) ** 2 + ((y[:, None] - cy) / sy) ** 2))
    return np.rint(peak * g).astype(np.int64).ravel()


def synthetic_image(width: int = 256, height: int = 144, channels: int = 1,
                    seed: int = 0) -> ImageBuffer:
    """Smooth gradient plus noise, every byte in 1..255 (never the default fill)."""
    rng = np.random.default_rng(derive_key(seed, "image"))
    yy, xx = np.mgrid[0:height, 0:width]
    base = 32 + 160 * (xx / max(width - 1, 1)) * 0.5 + 160 * (yy / max(height - 1, 1)) * 0.5
    arr = base[:, :, None] + rng.integers(-30, 31, size=(height, width, channels))
    return ImageBuffer.from_array(np.clip(arr, 1, 255).astype(np.uint8))


def top_decile_region(values) -> list[int]:
    """Highest-valued 10% of blocks (at least one); ties go to lower ids."""
    v = np.asarray(values, dtype=np.float64)
    k = max(1, math.ceil(0.1 * v.size))
    order = np.lexsort((np.arange(v.size), -v))
    return sorted(order[:k].tolist())


def cell_seed(master: int, loss: float, ratio: float, trial: int) -> int:
    return derive_key(master, float(loss), float(ratio), int(trial))


# ---------------------------------------------------------------------------
# spec


@dataclass
class ExperimentSpec:
    image: Optional[str] = None
    width: int = 256
    height: int = 144
    channels: int = 1
    block_width: int = 8
    block_height: int = 8
    packet_size: Optional[int] = None
    values: str = "uniform"           # uniform | heatmap | requirements | values | gaussian
    value_file: Optional[str] = None
    heatmap_sigma: float = DEFAULT_SIGMA
    floor: float = DEFAULT_HEATMAP_FLOOR
    channel: ChannelMode = ChannelMode.SIM_PACKET
    ratios: Sequence[float] = (1.0,)
    losses: Sequence[float] = (0.0,)
    trials: int = DEFAULT_TRIALS
    seed: int = 0
    engine: str = "kernel"
    send_interval_us: int = DEFAULT_INTERVAL_US
    guard_intervals: int = DEFAULT_GUARD_INTERVALS
    region_file: Optional[str] = None
    lossy_agreement: bool = False
    save_images: int = 0
    exact_coverage: bool = False
    fill: int = 0

    def validate(self) -> None:
        self.channel = ChannelMode(self.channel)
        if self.trials < 1:
            raise SpecError("trials must be >= 1")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise SpecError("budget ratios must be positive")
        if not self.losses or any(not 0 <= l <= 1 for l in self.losses):
            raise SpecError("loss rates must lie in [0, 1]")
        if len(set(self.losses)) != len(self.losses) or len(set(self.ratios)) != len(self.ratios):
            raise SpecError("loss rates and budget ratios must not repeat")
        if self.channel not in (ChannelMode.SIM_PACKET, ChannelMode.SIM_BLOCK):
            raise SpecError("simulation needs channel sim-packet or sim-block")
        if self.engine not in ("kernel", "protocol"):
            raise SpecError(f"unknown engine {self.engine!r}")
        if self.engine == "kernel" and self.lossy_agreement:
            raise SpecError("the kernel engine models an established session; "
                            "use --engine protocol for lossy agreement")
        if self.values not in ("uniform", "gaussian", "heatmap", "requirements", "values"):
            raise SpecError(f"unknown value source {self.values!r}")
        if self.values in ("heatmap", "requirements", "values") and not self.value_file:
            raise SpecError(f"value source {self.values!r} needs a file")
        for path in (self.image, self.value_file, self.region_file):
            if path and not os.path.exists(path):
                raise SpecError(f"file not found: {path}")


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class TrialRow:
    loss: float
    ratio: float
    trial: int
    seed: int
    agreement_ok: bool
    unique_blocks: int
    pixel_filling_rate: float
    region_coverage: float
    full_region: bool
    packets_sent: int
    duration: float


@dataclass
class CellSummary:
    loss: float
    ratio: float
    total_transmissions: int
    fragments_per_block: int
    trials: int
    mean_filling_rate: float
    se_filling_rate: float
    analytic_filling_rate: float
    full_region_rate: float
    se_full_region_rate: float
    analytic_full_region_product: float
    analytic_full_region_exact: float
    region_size: int
    agreement_failures: int


@dataclass
class BlockTable:
    loss: float
    ratio: float
    probabilities: np.ndarray
    empirical: np.ndarray
    rho_model: np.ndarray
    rho_attempts: np.ndarray
    rho_fragments: np.ndarray
    in_region: np.ndarray


@dataclass
class SimReport:
    spec: ExperimentSpec
    grid: BlockGrid
    region: list
    image: Optional[ImageBuffer] = None
    rows: list = field(default_factory=list)
    cells: list = field(default_factory=list)
    blocks: list = field(default_factory=list)
    saved_images: list = field(default_factory=list)

    def cell(self, loss: float, ratio: float) -> CellSummary:
        for c in self.cells:
            if c.loss == loss and c.ratio == ratio:
                return c
        raise KeyError((loss, ratio))

    def block_table(self, loss: float, ratio: float) -> BlockTable:
        for b in self.blocks:
            if b.loss == loss and b.ratio == ratio:
                return b
        raise KeyError((loss, ratio))


# ---------------------------------------------------------------------------
# sweep


def load_inputs(spec: ExperimentSpec) -> tuple[ImageBuffer, BlockGrid, list[BlockPayload]]:
    if spec.image:
        image = read_image(spec.image)
    else:
        image = synthetic_image(spec.width, spec.height, spec.channels, spec.seed)
    grid, payloads = tile(image, spec.block_width, spec.block_height)
    return image, grid, payloads


def packet_size_for(spec: ExperimentSpec, grid: BlockGrid) -> int:
    return spec.packet_size if spec.packet_size else grid.block_bytes


def base_values(spec: ExperimentSpec, grid: BlockGrid) -> Optional[np.ndarray]:
    """Block values that do not depend on the sweep cell (None for requirements)."""
    if spec.values == "uniform":
        v = uniform_values(grid.count).values
    elif spec.values == "gaussian":
        v = values_from_heatmap(gaussian_heatmap(grid.cols, grid.rows, spec.heatmap_sigma),
                                spec.floor).values
    elif spec.values == "heatmap":
        v = values_from_heatmap(formats.read_heatmap(spec.value_file), spec.floor).values
    elif spec.values == "values":
        v = normalize_values(formats.read_values(spec.value_file)).values
    else:
        return None
    if v.size != grid.count:
        raise SpecError(f"value source has {v.size} entries for {grid.count} blocks")
    return np.asarray(v)


def cell_plan(spec: ExperimentSpec, grid: BlockGrid, values: Optional[np.ndarray],
              loss: float, ratio: float) -> TransmissionPlan:
    pkt = packet_size_for(spec, grid)
    if values is not None:
        return make_plan(normalize_values(values), grid.block_bytes, pkt, ratio, loss)
    req = Requirements(formats.read_requirements(spec.value_file))
    if len(req) != grid.count:
        raise SpecError(f"requirements have {len(req)} entries for {grid.count} blocks")
    k = fragments_per_block(grid.block_bytes, pkt)
    n = transmission_count(grid.count, grid.count * grid.block_bytes,
                           ratio * grid.count * grid.block_bytes)
    vm = values_from_requirements(req, loss, k, n)
    return make_plan(vm, grid.block_bytes, pkt, ratio, loss)


def resolve_region(spec: ExperimentSpec, grid: BlockGrid, values: Optional[np.ndarray]
                   ) -> list[int]:
    if spec.region_file:
        region = formats.read_region(spec.region_file)
        if any(not 0 <= b < grid.count for b in region):
            raise SpecError("region block id out of range")
        return region
    if values is None:
        values = formats.read_requirements(spec.value_file)
    return top_decile_region(values)


def _success_probs(plan: TransmissionPlan, mode: ChannelMode) -> Optional[np.ndarray]:
    """Per-attempt deliver probabilities, when a block attempt is all-or-nothing."""
    k = plan.fragments_per_block
    loss = plan.channel.loss_rate
    if mode is ChannelMode.SIM_BLOCK:
        return plan.probabilities * plan.block_success
    if k == 1:
        return plan.probabilities * (1.0 - loss)
    return None


def simulate_cell(spec: ExperimentSpec, plan: TransmissionPlan, grid: BlockGrid,
                  payloads: Sequence[BlockPayload], loss: float, ratio: float
                  ) -> tuple[np.ndarray, list, np.ndarray]:
    """Received matrix (trials x blocks), per-trial (seed, ok, duration), and sent packets."""
    seeds = [cell_seed(spec.seed, loss, ratio, t) for t in range(spec.trials)]
    n = plan.total_transmissions
    k = plan.fragments_per_block
    interval = spec.send_interval_us * 1e-6
    if spec.engine == "kernel":
        keys = np.array([trial_stream_keys(s) for s in seeds], dtype=np.uint64)
        prob, alias = build_alias(plan.probabilities)
        per_packet = spec.channel is ChannelMode.SIM_PACKET
        threshold = loss if per_packet else loss ** k
        received = kernels.simulate_trials(prob, alias, n, k, threshold, per_packet,
                                           keys[:, 0], keys[:, 1], 0)
        meta = [(s, True, (n - 1) * interval) for s in seeds]
        return received, meta, np.full(spec.trials, n * k)

    received = np.zeros((spec.trials, grid.count), dtype=bool)
    meta = []
    sent = np.zeros(spec.trials, dtype=np.int64)
    for t, s in enumerate(seeds):
        try:
            res = run_simulated_session(
                plan, grid, payloads, seed=s, mode=spec.channel,
                send_interval_us=spec.send_interval_us,
                guard_intervals=spec.guard_intervals,
                lossy_agreement=spec.lossy_agreement, fill=spec.fill)
        except AgreementFailed:
            meta.append((s, False, 0.0))
            continue
        received[t, res.report.received_ids] = True
        sent[t] = res.sender.sent_count * k
        meta.append((s, True, res.sender.duration))
    return received, meta, sent


def run_sweep(spec: ExperimentSpec, progress: Optional[Callable[[str], None]] = None,
              image_dir: Optional[Path] = None) -> SimReport:
    spec.validate()
    image, grid, payloads = load_inputs(spec)
    values = base_values(spec, grid)
    region = resolve_region(spec, grid, values)
    region_mask = np.zeros(grid.count, dtype=bool)
    region_mask[region] = True
    report = SimReport(spec, grid, region, image)

    for loss in spec.losses:
        for ratio in spec.ratios:
            plan = cell_plan(spec, grid, values, loss, ratio)
            n, k = plan.total_transmissions, plan.fragments_per_block
            received, meta, sent = simulate_cell(spec, plan, grid, payloads, loss, ratio)
            unique = received.sum(axis=1)
            fill_rate = unique / grid.count
            hits = received[:, region_mask].sum(axis=1)
            coverage = hits / len(region)
            full = hits == len(region)
            for t in range(spec.trials):
                seed, ok, duration = meta[t]
                report.rows.append(TrialRow(
                    loss, ratio, t, seed, ok, int(unique[t]), float(fill_rate[t]),
                    float(coverage[t]), bool(full[t]), int(sent[t]), float(duration)))
            if image_dir is not None and spec.save_images:
                Path(image_dir).mkdir(parents=True, exist_ok=True)
                for t in range(min(spec.save_images, spec.trials)):
                    name = f"partial-L{float(loss)!r}-R{float(ratio)!r}-t{t}.{_ext(grid)}"
                    got = [payloads[b] for b in np.flatnonzero(received[t])]
                    write_image(image_dir / name, reassemble(grid, got, spec.fill).image)
                    report.saved_images.append((name, loss, ratio, t))

            rho_main = np.asarray(plan.arrival_probs)
            rho_att = np.asarray(arrival_probability_attempts(plan.probabilities, loss, k, n))
            rho_frag = np.asarray(arrival_probability_fragments(plan.probabilities, loss, k, n))
            model_rho = rho_main if spec.channel is ChannelMode.SIM_BLOCK else rho_frag
            q = _success_probs(plan, spec.channel)
            exact = (full_coverage_exact(q[region_mask], n)
                     if spec.exact_coverage and q is not None else float("nan"))
            trials = spec.trials
            report.cells.append(CellSummary(
                loss=loss, ratio=ratio, total_transmissions=n, fragments_per_block=k,
                trials=trials,
                mean_filling_rate=float(fill_rate.mean()),
                se_filling_rate=float(fill_rate.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0,
                analytic_filling_rate=float(model_rho.mean()),
                full_region_rate=float(full.mean()),
                se_full_region_rate=float(math.sqrt(full.mean() * (1 - full.mean()) / trials)),
                analytic_full_region_product=full_coverage_independent(rho_main[region_mask]),
                analytic_full_region_exact=exact,
                region_size=len(region),
                agreement_failures=sum(1 for m in meta if not m[1]),
            ))
            report.blocks.append(BlockTable(
                loss, ratio, np.asarray(plan.probabilities), received.mean(axis=0),
                rho_main, rho_att, rho_frag, region_mask.copy()))
            if progress:
                c = report.cells[-1]
                progress(f"loss={loss:g} ratio={ratio:g} N={n} fill={c.mean_filling_rate:.4f}"
                         f"±{c.se_filling_rate:.4f} full_region={c.full_region_rate:.3f}")
    return report


def _ext(grid: BlockGrid) -> str:
    return "pgm" if grid.channels == 1 else "ppm"


def write_report(report: SimReport, out: Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    spec = report.spec
    meta = {"channel": spec.channel.value, "engine": spec.engine, "seed": spec.seed,
            "blocks": report.grid.count, "region_size": len(report.region)}
    formats.write_table(
        out / "trials.csv", "trials",
        ["loss", "ratio", "trial", "seed", "agreement_ok", "unique_blocks",
         "pixel_filling_rate", "region_coverage", "full_region", "packets_sent", "duration_s"],
        ([r.loss, r.ratio, r.trial, r.seed, r.agreement_ok, r.unique_blocks,
          r.pixel_filling_rate, r.region_coverage, r.full_region, r.packets_sent, r.duration]
         for r in report.rows), meta)
    formats.write_table(
        out / "cells.csv", "cells",
        ["loss", "ratio", "N", "K", "trials", "mean_filling_rate", "se_filling_rate",
         "analytic_filling_rate", "full_region_rate", "se_full_region_rate",
         "analytic_full_region_product", "analytic_full_region_exact", "region_size",
         "agreement_failures"],
        ([c.loss, c.ratio, c.total_transmissions, c.fragments_per_block, c.trials,
          c.mean_filling_rate, c.se_filling_rate, c.analytic_filling_rate,
          c.full_region_rate, c.se_full_region_rate, c.analytic_full_region_product,
          c.analytic_full_region_exact, c.region_size, c.agreement_failures]
         for c in report.cells), meta)
    rows = []
    for b in report.blocks:
        for i in range(b.probabilities.size):
            rows.append([b.loss, b.ratio, i, b.probabilities[i], b.empirical[i], b.rho_model[i],
                         b.rho_attempts[i], b.rho_fragments[i], bool(b.in_region[i])])
    formats.write_table(
        out / "blocks.csv", "blocks",
        ["loss", "ratio", "index", "probability", "empirical_arrival", "rho_model",
         "rho_attempts", "rho_fragments", "in_region"], rows, meta)
    formats.write_region(out / "region.csv", report.region)
    if report.saved_images:
        if report.image is not None:
            write_image(out / f"original.{_ext(report.grid)}", report.image)
        formats.write_table(out / "images.csv", "images", ["file", "loss", "ratio", "trial"],
                            report.saved_images)


def monotone_violations(cells: Sequence[CellSummary], z: float = 2.0) -> list[str]:
    """Adjacent-cell trend breaks in mean filling rate.

    A break only counts when it exceeds ``z`` combined standard errors;
    smaller reversals are within sampling noise (overlapping intervals).
    """
    by = {(c.loss, c.ratio): c for c in cells}
    losses = sorted({c.loss for c in cells})
    ratios = sorted({c.ratio for c in cells})
    out = []

    def check(a, b, label):
        se = math.hypot(a.se_filling_rate, b.se_filling_rate)
        if b.mean_filling_rate < a.mean_filling_rate - z * se:
            out.append(f"{label}: {a.mean_filling_rate:.4f} -> {b.mean_filling_rate:.4f}")

    for loss in losses:
        for r1, r2 in zip(ratios, ratios[1:]):
            check(by[(loss, r1)], by[(loss, r2)], f"loss={loss:g} ratio {r1:g}->{r2:g}")
    for ratio in ratios:
        for l1, l2 in zip(losses, losses[1:]):
            check(by[(l2, ratio)], by[(l1, ratio)], f"ratio={ratio:g} loss {l1:g}->{l2:g}")
    return out


# ---------------------------------------------------------------------------
# audit


@dataclass(frozen=True)
class AuditRow:
    file: str
    unique_blocks: int
    pixel_filling_rate: float
    region_coverage: float
    full_region: bool
    ambiguous_blocks: int


def audit_directory(directory, region: Optional[Sequence[int]] = None,
                    original: Optional[str] = None, block_width: int = 8,
                    block_height: int = 8, fill: int = 0) -> list[AuditRow]:
    """Recompute metrics from saved partial images by comparing them to the original.

    Uses only image files, never in-run counters. ``original`` defaults to
    ``original.pgm``/``original.ppm`` inside ``directory``.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    if original is None:
        for name in ("original.pgm", "original.ppm"):
            if (directory / name).exists():
                original = str(directory / name)
                break
    if original is None:
        raise FileNotFoundError(f"{directory}: no original.pgm/original.ppm")
    src = read_image(original)
    grid = BlockGrid.for_image(src, block_width, block_height)
    files = sorted(p for p in directory.iterdir()
                   if p.suffix in (".pgm", ".ppm") and p.name != Path(original).name)
    if not files:
        raise FileNotFoundError(f"{directory}: no partial images")
    rows = []
    for path in files:
        out = read_image(path)
        got, ambiguous = received_from_pixels(grid, src, out, fill)
        partial = PartialImage(grid, got, out.pixels, fill)
        if region:
            cov = region_coverage(partial, region)
        else:
            cov = (float("nan"), False)
        rows.append(AuditRow(path.name, len(got), len(got) / grid.count,
                             float(cov[0]), bool(cov[1]), len(ambiguous)))
    return rows


def compare_audit(rows: Sequence[AuditRow], directory) -> list[str]:
    """Mismatches between audited images and trials.csv/images.csv, if present."""
    directory = Path(directory)
    if not (directory / "images.csv").exists() or not (directory / "trials.csv").exists():
        return []
    _, img_rows = formats.read_table(directory / "images.csv")
    header, trial_rows = formats.read_table(directory / "trials.csv")
    col = {h: i for i, h in enumerate(header)}
    trials = {(float(r[col["loss"]]), float(r[col["ratio"]]), int(r[col["trial"]])): r
              for r in trial_rows}
    by_file = {r.file: r for r in rows}
    problems = []
    for name, loss, ratio, trial in img_rows:
        audit = by_file.get(name)
        rec = trials.get((float(loss), float(ratio), int(trial)))
        if audit is None or rec is None:
            problems.append(f"{name}: missing audit or trial record")
            continue
        if audit.unique_blocks != int(rec[col["unique_blocks"]]):
            problems.append(f"{name}: unique blocks {audit.unique_blocks} != "
                            f"{rec[col['unique_blocks']]}")
        if audit.pixel_filling_rate != float(rec[col["pixel_filling_rate"]]):
            problems.append(f"{name}: filling rate mismatch")
        if not math.isnan(audit.region_coverage) and \
                audit.region_coverage != float(rec[col["region_coverage"]]):
            problems.append(f"{name}: region coverage mismatch")
    return problems


__all__ = [
    "ExperimentSpec", "SimReport", "TrialRow", "CellSummary", "BlockTable", "AuditRow",
    "gaussian_heatmap", "synthetic_image", "top_decile_region", "cell_seed", "run_sweep",
    "write_report", "audit_directory", "compare_audit", "monotone_violations",
    "SpecError", "ModelError", "ImageError",
]
