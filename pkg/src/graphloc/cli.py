"""graphloc simulate|track|eval|demo."""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional, Sequence

from .config import RunConfig, apply_sensor, load_config
from .geometry import Pose2
from .harness import (EvaluationError, TrackingResult, Trajectory, compute_ate, run_tracking)
from .prior_map import MapParseError, SensorModel, load_map, save_map
from .scan_sim import (ConfigError, generate_scenario, read_scans, read_sensor_header,
                       read_trajectory, simulate_all, write_scans, write_trajectory)

EXIT_OK, EXIT_INPUT, EXIT_LOST = 0, 2, 3


class InputError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _parse_pose(text: str) -> Pose2:
    parts = text.replace(",", " ").split()
    if len(parts) != 3:
        raise InputError("input", f"--seed-pose expects 'x,y,yaw', got {text!r}")
    try:
        return Pose2(*(float(p) for p in parts))
    except ValueError:
        raise InputError("input", f"--seed-pose has a non-numeric value: {text!r}") from None


def _config(path: Optional[str]) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _scenario(cfg: RunConfig, kind: Optional[str], seed: Optional[int]):
    params = dict(cfg.scenario)
    kind = kind or params.pop("kind", None)
    params.pop("kind", None)
    if kind is None:
        raise ConfigError("no scenario kind given (set scenario.kind)")
    if seed is not None:
        params["seed"] = seed
    if cfg.sensor:
        params.update(cfg.sensor)
    return generate_scenario(str(kind), **params)


def _write_outputs(outdir: str, scen, scans) -> dict:
    os.makedirs(outdir, exist_ok=True)
    paths = {k: os.path.join(outdir, f"{k}.txt") for k in ("map", "scans", "truth")}
    save_map(scen.map, paths["map"])
    write_scans(scans, paths["scans"], scen.sensor)
    write_trajectory(scen.times, scen.poses, paths["truth"])
    return paths


def _track_files(map_path, scans_path, seeds, cfg: RunConfig) -> TrackingResult:
    pmap = load_map(map_path)
    scans = read_scans(scans_path)
    sensor = read_sensor_header(scans_path) or SensorModel(ray_count=len(scans[0]))
    sensor = apply_sensor(sensor, cfg.sensor)
    cfg = RunConfig(cfg.match, cfg.estimator, cfg.frontend, None, cfg.scenario)
    try:
        return run_tracking(scans, pmap, sensor, seeds, cfg)
    except ValueError as exc:
        raise InputError("input", str(exc)) from None


def _write_tracking(result: TrackingResult, out: str) -> None:
    d = os.path.dirname(out)
    if d:
        os.makedirs(d, exist_ok=True)
    write_trajectory(result.trajectory.times, result.trajectory.poses, out)
    with open(out + ".diag", "w", encoding="utf-8") as f:
        f.write(result.format_diagnostics())


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    scen = _scenario(cfg, None, args.seed)
    paths = _write_outputs(args.out, scen, simulate_all(scen))
    print(f"wrote {paths['map']} {paths['scans']} {paths['truth']}")
    return EXIT_OK


def cmd_track(args) -> int:
    if not args.seed_pose:
        raise InputError("input", "track needs --seed-pose (once or twice)")
    seeds = [_parse_pose(s) for s in args.seed_pose]
    result = _track_files(args.map, args.scans, seeds, _config(args.config))
    _write_tracking(result, args.out)
    print(f"wrote {args.out} ({len(result.trajectory)} poses)")
    if result.lost:
        print("error: lost: tracking lost", file=sys.stderr)
        return EXIT_LOST
    return EXIT_OK


def _load_traj(path) -> Trajectory:
    t, p = read_trajectory(path)
    try:
        return Trajectory(t, p)
    except ValueError as exc:
        raise InputError("input", f"{path}: {exc}") from None


def cmd_eval(args) -> int:
    report = compute_ate(_load_traj(args.estimated), _load_traj(args.truth), align=args.align)
    text = report.format()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_demo(args) -> int:
    cfg = _config(args.config)
    scen = _scenario(cfg, args.kind, args.seed)
    paths = _write_outputs(args.out, scen, simulate_all(scen))
    # re-read from disk so a demo behaves exactly like simulate + track
    t, truth = read_trajectory(paths["truth"])
    result = _track_files(paths["map"], paths["scans"], truth[:2], cfg)
    traj_path = os.path.join(args.out, "trajectory.txt")
    _write_tracking(result, traj_path)
    report = compute_ate(result.trajectory, Trajectory(t, truth), align=args.align)
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as f:
        f.write(report.format())
    sys.stdout.write(report.format())
    if result.lost:
        print("error: lost: tracking lost", file=sys.stderr)
        return EXIT_LOST
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="graphloc", description="point-line graph pose tracking")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a scenario and write map/scans/truth")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="track a scan file against a map")
    p.add_argument("--map", required=True)
    p.add_argument("--scans", required=True)
    p.add_argument("--config")
    p.add_argument("--seed-pose", action="append", default=[],
                   help="known pose 'x,y,yaw' of the first scan; pass twice for a velocity seed")
    p.add_argument("--out", required=True, help="output trajectory file")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="absolute trajectory error")
    p.add_argument("estimated")
    p.add_argument("truth")
    p.add_argument("--align", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("demo", help="generate, track and evaluate one scenario")
    p.add_argument("kind", choices=["loop", "corridor", "parking"])
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="demo_out")
    p.add_argument("--align", action="store_true")
    p.set_defaults(func=cmd_demo)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        kind, msg = exc.kind, str(exc)
    except MapParseError as exc:
        kind, msg = "parse", str(exc)
    except ConfigError as exc:
        kind, msg = "config", str(exc)
    except EvaluationError as exc:
        kind, msg = "eval", str(exc)
    except OSError as exc:
        kind, msg = "io", f"{exc.filename}: {exc.strerror}"
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
