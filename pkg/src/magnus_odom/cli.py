"""``magnus-odom``: simulate scenarios, run the estimator, evaluate and compare.

Exit codes: 0 success, 1 usage, 2 data error, 3 estimator divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import tempfile
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from .errors import DataFormatError, DivergenceError, MagnusOdomError, SingularSystemError, TooShortError
from .estimator import OdometryEstimator
from .evaluation import kitti_errors, per_axis_drift, runtime_report, write_drift_csv, write_metrics_csv
from .io import Trajectory, iter_scans, read_trajectory, write_scans, write_trajectory
from .plots import drift_svg, trajectory_svg
from .simulator import path_length, scenario_presets, simulate

log = logging.getLogger("magnus_odom")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
DIAG_FIELDS = (
    "frame",
    "stamp",
    "n_det",
    "n_matched",
    "gn_iters",
    "cost",
    "runtime_ms",
    "fallback",
    "map_size",
    "inserted",
    "restarted",
)
COMPARE_FIELDS = (
    "scenario",
    "distance_km",
    "t_err_cv_c",
    "t_err_ca_p",
    "r_err_cv_c",
    "r_err_ca_p",
    "runtime_cv_c",
    "runtime_ca_p",
    "diverged_cv_c",
    "diverged_ca_p",
)


class UsageError(Exception):
    pass


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit value")
    return v


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _effective_config(args) -> dict:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.default_config()
    return cfgmod.apply_overrides(
        cfg,
        scenario=getattr(args, "scenario", None),
        seed=getattr(args, "seed", None),
        model=getattr(args, "model", None),
    )


def _check_scenario(name: str) -> None:
    presets = scenario_presets()
    if name not in presets:
        raise UsageError(f"unknown scenario {name!r}; valid scenarios: {', '.join(sorted(presets))}")


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #
def cmd_simulate(args, cfg: dict) -> int:
    _check_scenario(cfg["scenario"])
    noise = cfg["noise"] and not args.noise_free
    seq = simulate(cfg["scenario"], seed=cfg["seed"], noise=noise, sensor=cfgmod.build_sensor(cfg))
    os.makedirs(args.out, exist_ok=True)
    write_scans(os.path.join(args.out, "scans.jsonl"), seq.scans)
    write_trajectory(os.path.join(args.out, "gt.txt"), Trajectory.from_states(seq.ground_truth))
    log.info("wrote %d frames of %s (seed %d) to %s", len(seq.scans), cfg["scenario"], cfg["seed"], args.out)
    return EXIT_OK


def _write_diag(path: str, diags) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAG_FIELDS)
        for d in diags:
            w.writerow([getattr(d, f) for f in DIAG_FIELDS])


def cmd_run(args, cfg: dict) -> int:
    est = OdometryEstimator(cfgmod.build_estimator_config(cfg), cfgmod.build_sensor(cfg))
    if args.scans:
        scans = iter_scans(args.scans)
    else:
        _check_scenario(cfg["scenario"])
        scans = simulate(cfg["scenario"], seed=cfg["seed"], noise=cfg["noise"], sensor=est.sensor).scans
    os.makedirs(args.out, exist_ok=True)
    code = EXIT_OK
    try:
        for scan in scans:
            est.step_frame(scan)
    except (DivergenceError, SingularSystemError) as exc:
        log.error("estimator diverged at frame %d: %s", est.frame, exc)
        code = EXIT_DIVERGED
    # partial results are still written on divergence
    write_trajectory(os.path.join(args.out, "est.txt"), Trajectory.from_states(est.estimates))
    _write_diag(os.path.join(args.out, "diag.csv"), est.diagnostics)
    rt = runtime_report(est.diagnostics)
    log.info("%d frames, %.2f ms/frame mean (p95 %.2f)", rt.n, rt.mean, rt.p95)
    return code


def evaluate_files(est_path: str, gt_path: str, out: str):
    est = read_trajectory(est_path)
    gt = read_trajectory(gt_path)
    if len(est) != len(gt):
        raise DataFormatError(f"trajectory lengths differ: {len(est)} estimated vs {len(gt)} ground-truth poses")
    if not np.allclose(est.stamps, gt.stamps, atol=1e-9, rtol=0):
        raise DataFormatError("trajectory stamps differ")
    errors = kitti_errors(est.matrices(), gt.matrices())
    drift = per_axis_drift(est.matrices(), gt.matrices())
    os.makedirs(out, exist_ok=True)
    write_metrics_csv(os.path.join(out, "metrics.csv"), errors)
    write_drift_csv(os.path.join(out, "drift.csv"), drift)
    _atomic_write(os.path.join(out, "trajectory.svg"), trajectory_svg(est.positions, gt.positions))
    _atomic_write(os.path.join(out, "drift.svg"), drift_svg(drift.distance, drift.z, drift.roll, drift.pitch))
    return errors


def cmd_evaluate(args, cfg: dict) -> int:
    errors = evaluate_files(args.est, args.gt, args.out)
    print(f"t_err {errors.t_err:.4f} %  r_err {errors.r_err:.6f} deg/m")
    return EXIT_OK


@dataclass
class Cell:
    scenario: str
    seed: int
    model: str
    distance_km: float
    t_err: float
    r_err: float
    n_segments: int
    runtime_ms: float
    diverged: bool
    drift: dict


def run_cell(scenario: str, seed: int, model: str, cfg: dict, seq=None) -> Cell:
    """One (scenario, seed, model) run; divergence is recorded, not raised."""
    sensor = cfgmod.build_sensor(cfg)
    seq = seq or simulate(scenario, seed=seed, noise=cfg["noise"], sensor=sensor)
    est = OdometryEstimator(cfgmod.build_estimator_config(cfg, model), sensor)
    diverged = False
    try:
        est.run(seq.scans)
    except (DivergenceError, SingularSystemError) as exc:
        log.warning("%s seed %d %s diverged at frame %d: %s", scenario, seed, model, est.frame, exc)
        diverged = True
    gt = seq.ground_truth[: len(est.estimates)]
    dist = path_length(seq.ground_truth)
    try:
        e = kitti_errors(est.estimates, gt)
        t, r, n, drift = e.t_err, e.r_err, e.n_segments, e.drift
    except TooShortError:
        t, r, n, drift = float("nan"), float("nan"), 0, {}
    rt = runtime_report(est.diagnostics).mean
    return Cell(scenario, seed, model, dist / 1000.0, t, r, n, rt, diverged, drift)


def _pool(cells: list[Cell], attr: str) -> float:
    ok = [c for c in cells if c.n_segments and not c.diverged]
    w = sum(c.n_segments for c in ok)
    return sum(getattr(c, attr) * c.n_segments for c in ok) / w if w else float("nan")


def compare_rows(cells: list[Cell], scenarios) -> list[dict]:
    rows = []
    groups = [(s, [c for c in cells if c.scenario == s]) for s in scenarios] + [("overall", cells)]
    for name, group in groups:
        by = {m: [c for c in group if c.model == m] for m in cfgmod.MODELS}
        # distance counts each (scenario, seed) once
        dist = sum(c.distance_km for c in by["ca_p"]) or sum(c.distance_km for c in by["cv_c"])
        row = {"scenario": name, "distance_km": f"{dist:.3f}"}
        for m in cfgmod.MODELS:
            rt = float(np.mean([c.runtime_ms for c in by[m]])) if by[m] else float("nan")
            row[f"t_err_{m}"] = f"{_pool(by[m], 't_err'):.4f}"
            row[f"r_err_{m}"] = f"{_pool(by[m], 'r_err'):.6f}"
            row[f"runtime_{m}"] = f"{rt:.3f}"
            row[f"diverged_{m}"] = sum(c.diverged for c in by[m])
        rows.append(row)
    return rows


def write_compare_csv(path: str, rows: list[dict]) -> None:
    lines = [",".join(COMPARE_FIELDS)]
    lines += [",".join(str(r[f]) for f in COMPARE_FIELDS) for r in rows]
    _atomic_write(path, "\n".join(lines) + "\n")


def cmd_compare(args, cfg: dict) -> int:
    scenarios = args.scenarios.split(",")
    for s in scenarios:
        _check_scenario(s)
    seeds = [_seed(s) for s in args.seeds.split(",")]
    cells = []
    sensor = cfgmod.build_sensor(cfg)
    for s in scenarios:
        for seed in seeds:
            seq = simulate(s, seed=seed, noise=cfg["noise"], sensor=sensor)
            for m in cfgmod.MODELS:
                cell = run_cell(s, seed, m, cfg, seq)
                log.info("%s seed %d %s: t_err %.4f %% r_err %.6f deg/m", s, seed, m, cell.t_err, cell.r_err)
                cells.append(cell)
    os.makedirs(args.out, exist_ok=True)
    rows = compare_rows(cells, scenarios)
    write_compare_csv(os.path.join(args.out, "compare.csv"), rows)
    for r in rows:
        print(",".join(str(r[f]) for f in COMPARE_FIELDS))
    return EXIT_OK


# --------------------------------------------------------------------------- #
# entry point
# --------------------------------------------------------------------------- #
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration (all keys required; see --print-config)")
    common.add_argument("--seed", type=_seed)
    common.add_argument("--model", choices=cfgmod.MODELS)
    common.add_argument("--out", default=".")
    common.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="magnus-odom", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="write scans.jsonl and gt.txt for a preset")
    s.add_argument("--scenario")
    s.add_argument("--noise-free", action="store_true")
    r = sub.add_parser("run", parents=[common], help="run the estimator; writes est.txt and diag.csv")
    r.add_argument("--scenario", help="simulate this preset when --scans is not given")
    r.add_argument("--scans", help="scans.jsonl input")
    e = sub.add_parser("evaluate", parents=[common], help="metrics.csv, drift.csv and SVG plots")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    c = sub.add_parser("compare", parents=[common], help="CA/P vs CV/C table over scenarios and seeds")
    c.add_argument("--scenarios", default="urban_stop_go,highway,hilly_loop")
    c.add_argument("--seeds", default="0,1,2,3,4")
    return p


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "evaluate": cmd_evaluate, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _effective_config(args)
        if args.print_config:
            sys.stdout.write(cfgmod.dump_config(cfg))
            return EXIT_OK
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, TooShortError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, SingularSystemError) as exc:
        print(f"error: estimator diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except MagnusOdomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
