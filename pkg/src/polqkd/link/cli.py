"""Command-line front end: ``simulate``, ``curve``, ``optimize`` and ``keylen``.

Exit status is 0 on success, 1 on bad input and 2 when a session aborts.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from ..cascade import binary_entropy
from ..config import Config, ConfigError, load_config
from ..finitekey import F_EC_MODEL, IntensityTallies, compute_bounds, expected_run, optimize_params
from .session import run_session

EXIT_OK, EXIT_INPUT, EXIT_ABORT = 0, 1, 2
# block size used unless the full-size block is requested
TEST_N_Z_PA = 819_200
FULL_N_Z_PA = 8_192_000

CURVE_COLUMNS = ["distance_km", "skr_bps", "qber_z", "qber_x", "l_total", "mu1", "mu2", "p_mu1", "cause"]


def read_config(path: str | None) -> Config:
    if path is None:
        return Config()
    return load_config(Path(path).read_text())


def distances_between(start: float, stop: float, step: float) -> list[float]:
    """Inclusive arithmetic range, robust to float accumulation."""
    if step <= 0:
        raise ValueError("step must be positive")
    if stop < start:
        raise ValueError("--to must not be below --from")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 9) for i in range(count)]


def curve(
    cfg: Config,
    distances,
    analytic: bool = False,
    optimize: bool = False,
    seed: int = 0,
    transport: str = "queue",
) -> list[dict]:
    """One CSV row per distance; failures become ``skr_bps = 0`` with a cause."""
    if len(distances) == 0:
        raise ValueError("distances must be non-empty")
    rows = []
    for i, d in enumerate(distances):
        at = cfg.replace(fiber_length=float(d))
        if optimize:
            opt = optimize_params(d, at)
            if opt.skr > 0:
                at = at.replace(mu1=opt.mu1, mu2=opt.mu2, p_mu1=opt.p_mu1)
        p = at.protocol
        row = {"distance_km": float(d), "skr_bps": 0.0, "qber_z": 0.0, "qber_x": 0.0, "l_total": 0}
        row.update(mu1=p.mu1, mu2=p.mu2, p_mu1=p.p_mu1, cause="")
        if analytic:
            run = expected_run(at)
            if run is None:
                row["cause"] = "no detections"
            else:
                row.update(skr_bps=run.skr, qber_z=run.qber_z, qber_x=run.qber_x, l_total=run.bounds.l)
                if run.bounds.l == 0:
                    row["cause"] = "key length zero"
        else:
            report = run_session(at, seed + i, transport=transport).report
            if report.aborted:
                row["cause"] = report.cause
            else:
                row.update(skr_bps=report.skr, qber_z=report.qber_z, qber_x=report.qber_x, l_total=report.l_total)
                if report.l_total == 0:
                    row["cause"] = "key length zero"
        rows.append(row)
    return rows


def write_curve_csv(rows: list[dict], fh) -> None:
    w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        out = dict(row)
        for key in ("skr_bps", "qber_z", "qber_x"):
            out[key] = f"{row[key]:.6g}"
        for key in ("mu1", "mu2", "p_mu1"):
            out[key] = f"{row[key]:.4f}"
        w.writerow(out)


def write_key(path: str, bits: np.ndarray, fmt: str) -> None:
    if fmt == "bin":
        Path(path).write_bytes(np.packbits(bits).tobytes())
        return
    # hex lines of 32 bytes, MSB-first within each byte
    data = np.packbits(bits).tobytes()
    lines = [data[i : i + 32].hex() for i in range(0, len(data), 32)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def tallies_lambda(data: dict, tallies: IntensityTallies) -> float:
    """``lambda_ec`` from the file, else the model leak for the tallied QBER."""
    if "lambda_ec" in data:
        return float(data["lambda_ec"])
    n = float(tallies.n_z.sum())
    if n == 0:
        return 0.0
    return F_EC_MODEL * n * binary_entropy(tallies.m_z_total / n)


# -- subcommands -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = read_config(args.config)
    cfg = cfg.replace(fiber_length=args.distance, n_z_pa=FULL_N_Z_PA if args.paper_blocks else TEST_N_Z_PA)
    result = run_session(
        cfg,
        args.seed,
        transport=args.transport,
        trace_path=args.trace,
        feedback_trace_path=args.feedback_trace,
    )
    print(result.report.to_json())
    if result.report.aborted:
        print(f"session aborted: {result.report.cause}", file=sys.stderr)
        return EXIT_ABORT
    if args.key_out:
        write_key(args.key_out, result.alice_key, args.key_format)
    return EXIT_OK


def cmd_curve(args) -> int:
    cfg = read_config(args.config)
    if not args.paper_blocks:
        cfg = cfg.replace(n_z_pa=TEST_N_Z_PA)
    distances = distances_between(args.start, args.stop, args.step)
    rows = curve(cfg, distances, analytic=args.analytic, optimize=args.optimize, seed=args.seed, transport=args.transport)
    if args.out == "-":
        write_curve_csv(rows, sys.stdout)
    else:
        with open(args.out, "w", newline="") as fh:
            write_curve_csv(rows, fh)
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = read_config(args.config)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["distance_km", "mu1", "mu2", "p_mu1", "skr_bps"])
    for d in args.distance:
        opt = optimize_params(d, cfg)
        w.writerow([f"{d:g}", f"{opt.mu1:.4f}", f"{opt.mu2:.4f}", f"{opt.p_mu1:.4f}", f"{opt.skr:.6g}"])
    return EXIT_OK


def cmd_keylen(args) -> int:
    data = json.loads(Path(args.tallies).read_text())
    cfg = read_config(args.config)
    if "config" in data:
        cfg = cfg.replace(**data["config"])
    tallies = IntensityTallies.from_dict(data)
    lam = tallies_lambda(data, tallies)
    bounds = compute_bounds(tallies, lam, cfg.protocol, cfg.security)
    for name, value in bounds.as_dict().items():
        if name != "l":
            print(f"{name:<12} {value:.6f}")
    print(f"{'l':<12} {bounds.l}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polqkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one seeded key session")
    sim.add_argument("--config", help="JSON config file (defaults if omitted)")
    sim.add_argument("--distance", type=float, required=True, help="fiber length in km")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--paper-blocks", action="store_true", help=f"use n_z_pa = {FULL_N_Z_PA}")
    sim.add_argument("--transport", choices=["queue", "tcp"], default="queue")
    sim.add_argument("--trace", help="write the per-slot trace CSV here")
    sim.add_argument("--feedback-trace", help="write the feedback trace CSV here")
    sim.add_argument("--key-out", help="write the secret key here")
    sim.add_argument("--key-format", choices=["bin", "hex"], default="hex")
    sim.set_defaults(func=cmd_simulate)

    cur = sub.add_parser("curve", help="key rate against distance as CSV")
    cur.add_argument("--config")
    cur.add_argument("--from", dest="start", type=float, required=True)
    cur.add_argument("--to", dest="stop", type=float, required=True)
    cur.add_argument("--step", type=float, required=True)
    cur.add_argument("--analytic", action="store_true", help="evaluate the expected-rate model instead of simulating")
    cur.add_argument("--optimize", action="store_true", help="optimize intensities per distance")
    cur.add_argument("--paper-blocks", action="store_true")
    cur.add_argument("--seed", type=int, default=0)
    cur.add_argument("--transport", choices=["queue", "tcp"], default="queue")
    cur.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    cur.set_defaults(func=cmd_curve)

    opt = sub.add_parser("optimize", help="best (mu1, mu2, p_mu1) per distance as CSV")
    opt.add_argument("--config")
    opt.add_argument("--distance", type=float, nargs="+", required=True)
    opt.set_defaults(func=cmd_optimize)

    kl = sub.add_parser("keylen", help="bounds and key length for a tallies JSON file")
    kl.add_argument("--tallies", required=True)
    kl.add_argument("--config")
    kl.set_defaults(func=cmd_keylen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
