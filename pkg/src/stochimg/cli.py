"""Command-line front end.

Exit status: 0 on success, 1 when requirements are infeasible or a session
fails, 2 on bad usage or unreadable inputs.

Every option can also come from ``--config FILE`` (``key = value`` lines,
keys spelled like the long option with or without dashes). Options given on
the command line win over the file.
"""

from __future__ import annotations

import argparse
import logging
import socket
import sys
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import formats
from .channel import (ChannelConfig, ChannelMode, NoDrops, PacketDrops, ScriptedDrops,
                      UdpTransport, read_drop_script)
from .experiments import (ExperimentSpec, SpecError, audit_directory, base_values,
                          cell_plan, compare_audit, load_inputs, monotone_violations,
                          run_sweep, write_report)
from .image import ImageError, write_image
from .model import (ChannelDeliversNothing, InfeasibleRequirements, ModelError, Requirements,
                    UnattainableRequirement, feasibility_check, fragments_per_block,
                    min_probability_for, transmission_count)
from .protocol import (AgreementFailed, ProtocolError, Receiver, Sender, forward_seed,
                       run_agreement, run_block_phase, run_simulated_session, serve_udp)
from .wire import WireError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# option parsing


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _floats(text) -> list[float]:
    try:
        return [float(x) for x in str(text).replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated number list: {text!r}") from None


def _block(text) -> tuple[int, int]:
    try:
        w, h = str(text).lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"block size must look like 8x8, got {text!r}") from None


def _endpoint(text) -> tuple[str, int]:
    host, _, port = str(text).rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"endpoint must be host:port, got {text!r}") from None


# dest -> (type, default, help); flag is --dest with underscores as dashes
OPTIONS: dict[str, tuple[Callable, object, str]] = {
    "seed": (int, 0, "master seed"),
    "image": (str, None, "input PGM/PPM (default: synthetic image)"),
    "width": (int, 256, "synthetic image width"),
    "height": (int, 144, "synthetic image height"),
    "channels": (int, 1, "synthetic image channels (1 or 3)"),
    "block": (_block, (8, 8), "block size WxH in pixels"),
    "packet_size": (int, None, "fragment payload bytes (default: one block)"),
    "values": (str, None, "value source: uniform, gaussian, heatmap, requirements, values"),
    "heatmap": (str, None, "heatmap CSV (index, frequency)"),
    "requirements": (str, None, "requirements CSV (index, required)"),
    "value_file": (str, None, "raw value CSV (index, value)"),
    "floor": (float, 0.01, "heatmap floor added to normalized counts"),
    "sigma": (float, 0.125, "synthetic heatmap spread, fraction of grid size"),
    "channel": (str, None, "udp, sim-packet, sim-block or scripted"),
    "loss": (float, 0.0, "loss rate L"),
    "delay_us": (int, 0, "one-way channel delay"),
    "drop_script": (str, None, "file of 1-based datagram numbers to drop"),
    "ratio": (float, 1.0, "budget S_prp/S_org"),
    "ratios": (_floats, None, "comma-separated budget ratios"),
    "losses": (_floats, None, "comma-separated loss rates"),
    "trials": (int, 1000, "trials per sweep cell"),
    "engine": (str, "kernel", "kernel or protocol"),
    "lossy_agreement": (_bool, False, "run the handshake over the lossy channels"),
    "exact_coverage": (_bool, False, "also compute exact full-region coverage"),
    "save_images": (int, 0, "partial images to save per cell"),
    "region": (str, None, "region CSV (block_id)"),
    "fill": (int, 0, "byte value for missing blocks"),
    "interval_us": (int, 1000, "pacing between block attempts"),
    "guard": (int, 50, "receiver guard intervals after the last expected attempt"),
    "peer": (_endpoint, None, "receiver host:port"),
    "listen": (_endpoint, ("0.0.0.0", 5683), "bind host:port"),
    "agreement_wait": (float, 30.0, "seconds to wait for an agreement request"),
    "original": (str, None, "original image for the audit"),
    "out": (str, None, "output directory"),
}

COMMAND_OPTIONS = {
    "plan": ["seed", "image", "width", "height", "channels", "block", "packet_size",
             "values", "heatmap", "requirements", "value_file", "floor", "sigma", "loss",
             "ratio", "out"],
    "send": ["seed", "image", "width", "height", "channels", "block", "packet_size",
             "values", "heatmap", "requirements", "value_file", "floor", "sigma", "channel",
             "loss", "delay_us", "drop_script", "ratio", "interval_us", "guard", "fill",
             "peer", "out"],
    "recv": ["listen", "guard", "fill", "agreement_wait", "out"],
    "simulate": ["seed", "image", "width", "height", "channels", "block", "packet_size",
                 "values", "heatmap", "requirements", "value_file", "floor", "sigma",
                 "channel", "ratios", "losses", "trials", "engine", "lossy_agreement",
                 "exact_coverage", "save_images", "region", "fill", "interval_us", "guard",
                 "out"],
    "metrics": ["region", "original", "block", "fill", "out"],
}

BOOL_FLAGS = {"lossy_agreement", "exact_coverage"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochimg",
                                     description="Value-weighted stochastic image transfer.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "plan": "compute probabilities, budget and feasibility",
        "send": "transmit an image (UDP, or in-process over a simulated channel)",
        "recv": "receive one image over UDP",
        "simulate": "Monte Carlo sweep over loss rates and budget ratios",
        "metrics": "recompute metrics from saved images",
    }
    for name, dests in COMMAND_OPTIONS.items():
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="key = value file; flags override it")
        if name == "metrics":
            p.add_argument("directory", help="directory with partial images")
        for dest in dests:
            typ, default, text = OPTIONS[dest]
            flag = "--" + dest.replace("_", "-")
            if dest in BOOL_FLAGS:
                p.add_argument(flag, dest=dest, nargs="?", const=True, default=None,
                               type=_bool, help=f"{text} (default {default})")
            else:
                p.add_argument(flag, dest=dest, type=typ, default=None,
                               help=f"{text} (default {default})")
    return parser


def resolve_options(args: argparse.Namespace) -> argparse.Namespace:
    """Layer command line over config file over built-in defaults."""
    allowed = set(COMMAND_OPTIONS[args.command])
    config = {}
    if getattr(args, "config", None):
        try:
            config = formats.read_kv(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        unknown = sorted(set(config) - allowed)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    for dest in allowed:
        if getattr(args, dest) is not None:
            continue
        typ, default, _ = OPTIONS[dest]
        if dest in config:
            try:
                setattr(args, dest, typ(config[dest]))
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {dest}: {exc}") from None
        else:
            setattr(args, dest, default)
    return args


def spec_from_args(args, **overrides) -> ExperimentSpec:
    sources = [(k, getattr(args, k, None)) for k in ("heatmap", "requirements", "value_file")]
    given = [(k, v) for k, v in sources if v]
    if len(given) > 1:
        raise UsageError("give at most one of --heatmap, --requirements, --value-file")
    values = args.values
    value_file = None
    if given:
        kind, value_file = given[0]
        kind = "values" if kind == "value_file" else kind
        if values not in (None, kind):
            raise UsageError(f"--values {values} conflicts with --{kind.replace('_', '-')}")
        values = kind
    values = values or "uniform"
    bw, bh = args.block
    fields = dict(
        image=args.image, width=args.width, height=args.height, channels=args.channels,
        block_width=bw, block_height=bh, packet_size=args.packet_size, values=values,
        value_file=value_file, heatmap_sigma=args.sigma, floor=args.floor, seed=args.seed,
    )
    fields.update(overrides)
    spec = ExperimentSpec(**fields)
    return spec


# ---------------------------------------------------------------------------
# commands


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_plan(args) -> int:
    spec = spec_from_args(args, losses=(args.loss,), ratios=(args.ratio,), trials=1)
    spec.validate()
    _, grid, _ = load_inputs(spec)
    out = _out_dir(args, "plan-out")
    values = base_values(spec, grid)
    summary = {}
    req = None
    if values is None:
        req = Requirements(formats.read_requirements(spec.value_file))
        pkt = spec.packet_size or grid.block_bytes
        k = fragments_per_block(grid.block_bytes, pkt)
        n = transmission_count(grid.count, grid.image_bytes, args.ratio * grid.image_bytes)
        report = feasibility_check(req, args.loss, k, n)
        summary.update(feasible=report.feasible, feasibility_lhs=report.lhs,
                       feasibility_rhs=report.rhs, feasibility_slack=report.slack)
        if not report.feasible:
            summary.update(blocks=grid.count, N=n, K=k, loss=args.loss, ratio=args.ratio)
            formats.write_kv(out / "plan.txt", summary)
            print(f"infeasible: sum (1-R_i)^(1/N) = {report.lhs:.12g} < "
                  f"|I| - 1 + L^K = {report.rhs:.12g} (slack {report.slack:.3g})")
            return EXIT_FAIL
    plan = cell_plan(spec, grid, values, args.loss, args.ratio)
    n, k = plan.total_transmissions, plan.fragments_per_block
    summary = {
        "blocks": grid.count, "width": grid.width, "height": grid.height,
        "channels": grid.channels, "block_width": grid.block_width,
        "block_height": grid.block_height, "block_bytes": grid.block_bytes,
        "packet_size": plan.channel.packet_size, "loss": args.loss, "ratio": args.ratio,
        "N": n, "K": k, "transmit_bytes": plan.realized_transmit_size,
        "block_success": plan.block_success,
        "mean_arrival": float(np.mean(plan.arrival_probs)),
        "value_source": spec.values, **summary,
    }
    formats.write_kv(out / "plan.txt", summary)
    header = ["index", "probability", "expected_count", "arrival_probability"]
    columns = [plan.probabilities, plan.expected_counts, plan.arrival_probs]
    if req is not None:
        header += ["required", "min_probability"]
        columns += [req.required_reception,
                    [min_probability_for(r, args.loss, k, n) for r in req.required_reception]]
    rows = ([i] + [float(c[i]) for c in columns] for i in range(grid.count))
    formats.write_table(out / "plan.csv", "plan", header, rows,
                        {"N": n, "K": k, "loss": args.loss, "ratio": args.ratio})
    print(f"blocks={grid.count} N={n} K={k} loss={args.loss:g} ratio={args.ratio:g} "
          f"mean arrival={summary['mean_arrival']:.6f}")
    if "feasibility_slack" in summary:
        print(f"feasible, slack {summary['feasibility_slack']:.6g}")
    print(f"wrote {out / 'plan.txt'} and {out / 'plan.csv'}")
    return EXIT_OK


def _sender_inputs(args):
    spec = spec_from_args(args, losses=(args.loss,), ratios=(args.ratio,), trials=1)
    spec.validate()
    image, grid, payloads = load_inputs(spec)
    plan = cell_plan(spec, grid, base_values(spec, grid), args.loss, args.ratio)
    return spec, image, grid, payloads, plan


def _write_send_log(path: Path, records, meta) -> None:
    formats.write_table(path, "sendlog", ["sequence", "block_id", "time_s"],
                        ([r.sequence, r.block_id, r.timestamp] for r in records), meta)


def _write_reception(out: Path, partial, report) -> Path:
    ext = "pgm" if partial.grid.channels == 1 else "ppm"
    path = out / f"received.{ext}"
    write_image(path, partial.image)
    formats.write_kv(out / "reception.txt", {
        "blocks": report.block_count, "unique_blocks": report.unique_blocks,
        "pixel_filling_rate": report.unique_blocks / report.block_count,
        "data_packets": report.data_packets, "duplicate_fragments": report.duplicate_fragments,
        "undecodable": report.undecodable, "late_packets": report.late_packets,
        "agreement_requests": report.agreement_requests,
    }, kind="reception")
    if report.received_ids:
        formats.write_region(out / "received_blocks.csv", report.received_ids)
    return path


def cmd_send(args) -> int:
    mode = ChannelMode(args.channel or "udp")
    drop_list = read_drop_script(args.drop_script) if args.drop_script else None
    if mode is ChannelMode.SCRIPTED and drop_list is None:
        raise UsageError("--channel scripted needs --drop-script")
    spec, image, grid, payloads, plan = _sender_inputs(args)
    out = _out_dir(args, "send-out")
    meta = {"seed": args.seed, "N": plan.total_transmissions, "K": plan.fragments_per_block,
            "channel": mode.value}

    if mode is not ChannelMode.UDP:
        res = run_simulated_session(plan, grid, payloads, seed=args.seed, mode=mode,
                                    send_interval_us=args.interval_us,
                                    guard_intervals=args.guard, delay_us=args.delay_us,
                                    drop_list=drop_list, fill=args.fill)
        _write_send_log(out / "send_log.csv", res.send_log, meta)
        path = _write_reception(out, res.partial, res.report)
        print(f"sent {res.sender.sent_count} attempts; received {res.report.unique_blocks}/"
              f"{grid.count} blocks; wrote {path}")
        return EXIT_OK

    if args.peer is None:
        raise UsageError("udp send needs --peer host:port")
    if drop_list is not None:
        drops = ScriptedDrops(drop_list)
    elif args.loss > 0:
        drops = PacketDrops(args.loss, ChannelConfig(seed=forward_seed(args.seed)).stream_key)
    else:
        drops = NoDrops()
    transport = UdpTransport(args.peer, drops=drops)
    sender = Sender(plan, grid, payloads, seed=args.seed, send_interval_us=args.interval_us)
    try:
        run_agreement(sender, transport)
        records = run_block_phase(sender, transport)
    finally:
        transport.close()
    _write_send_log(out / "send_log.csv", records, meta)
    print(f"sent {len(records)} attempts in {sender.duration:.3f} s "
          f"({transport.dropped} datagrams dropped by emulation)")
    return EXIT_OK


def cmd_recv(args) -> int:
    out = _out_dir(args, "recv-out")
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.bind(args.listen)
        receiver = Receiver(guard_intervals=args.guard, fill=args.fill)
        partial, report = serve_udp(receiver, sock, agreement_wait=args.agreement_wait)
    finally:
        sock.close()
    path = _write_reception(out, partial, report)
    print(f"received {report.unique_blocks}/{report.block_count} blocks; wrote {path}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    mode = ChannelMode(args.channel or "sim-packet")
    spec = spec_from_args(
        args, channel=mode, ratios=tuple(args.ratios or (1.0,)),
        losses=tuple(args.losses or (0.0,)), trials=args.trials, engine=args.engine,
        send_interval_us=args.interval_us, guard_intervals=args.guard,
        region_file=args.region, lossy_agreement=args.lossy_agreement,
        save_images=args.save_images, exact_coverage=args.exact_coverage, fill=args.fill)
    out = _out_dir(args, "sim-out")
    report = run_sweep(spec, progress=print, image_dir=out if spec.save_images else None)
    write_report(report, out)
    breaks = monotone_violations(report.cells)
    for b in breaks:
        print(f"trend break beyond 2 SE: {b}")
    print(f"{len(report.rows)} trials over {len(report.cells)} cells; wrote {out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    directory = Path(args.directory)
    region = formats.read_region(args.region) if args.region else None
    if region is None and (directory / "region.csv").exists():
        region = formats.read_region(directory / "region.csv")
    bw, bh = args.block
    rows = audit_directory(directory, region, args.original, bw, bh, args.fill)
    out = Path(args.out) if args.out else directory / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    formats.write_table(out, "metrics",
                        ["file", "unique_blocks", "pixel_filling_rate", "region_coverage",
                         "full_region", "ambiguous_blocks"],
                        ([r.file, r.unique_blocks, r.pixel_filling_rate, r.region_coverage,
                          r.full_region, r.ambiguous_blocks] for r in rows))
    problems = compare_audit(rows, directory)
    for p in problems:
        print(f"mismatch: {p}")
    mean = sum(r.pixel_filling_rate for r in rows) / len(rows)
    print(f"audited {len(rows)} images, mean filling rate {mean:.6f}; wrote {out}")
    return EXIT_FAIL if problems else EXIT_OK


COMMANDS = {"plan": cmd_plan, "send": cmd_send, "recv": cmd_recv,
            "simulate": cmd_simulate, "metrics": cmd_metrics}

FAILURES = (InfeasibleRequirements, UnattainableRequirement, ChannelDeliversNothing,
            ProtocolError)
USAGE = (UsageError, SpecError, ModelError, ImageError, WireError, formats.FormatError,
         OSError, ValueError)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        resolve_options(args)
        return COMMANDS[args.command](args)
    except FAILURES as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except USAGE as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
