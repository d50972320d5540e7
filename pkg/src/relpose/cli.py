"""Command-line benchmark runner and dataset tool.

Three subcommands:

``relpose simulate``
    Synthesize a dataset file from a seeded trajectory spec.
``relpose estimate``
    Run all four estimator tiers over a dataset; write per-frame estimates
    ("EST tier robot ts px py pz qw qx qy qz", 9 significant digits, with a
    versioned header) and a metrics CSV.
``relpose benchmark``
    Sweep one axis (robots / window / missing / outlier / anonymous) over
    seeded trials and emit mean/std metric rows plus per-frame wall times.

Configuration precedence is flags > config file > defaults; the config file
is flat ``key=value`` text (keys are the long flag names with underscores).
``RELPOSE_THREADS`` caps the benchmark worker pool. Exit codes: 0 success,
2 usage/configuration error, 3 unreadable or infeasible data.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import metrics, sim
from .core import Extrinsics, NoiseConfig
from .multi_frame import MultiFrameEstimator
from .single_frame import SingleFrameError, run_sfc, run_sfo

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3

TIERS = ("sfc", "sfo", "mflo", "mfto")

_DEFAULTS = {
    "robots": 10,
    "duration": 10.0,
    "seed": 0,
    "out": None,
    "missing_rate": 0.0,
    "outlier_rate": 0.0,
    "anonymous": False,
    "distance_dropout": 0.0,
    "noise_scale": 1.0,
    "gravity_mode": "constant",
    "control_point_rate": 0.5,
    "imu_hz": 100.0,
    "reference": 0,
    "window": 10,
    "gravity": "on",
    "pcm_threshold": "0.95",
    "tiers": ",".join(TIERS),
    "axis": None,
    "values": None,
    "trials": 3,
}

_BOOL_KEYS = {"anonymous"}
_INT_KEYS = {"robots", "seed", "reference", "window", "trials"}
_FLOAT_KEYS = {
    "duration",
    "missing_rate",
    "outlier_rate",
    "distance_dropout",
    "noise_scale",
    "control_point_rate",
    "imu_hz",
}


class UsageError(Exception):
    pass


def _parse_bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "on", "yes"):
        return True
    if value in ("0", "false", "off", "no"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _read_config(path):
    out = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key=value")
                key, value = line.split("=", 1)
                key = key.strip().replace("-", "_")
                if key not in _DEFAULTS:
                    raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
                out[key] = value.strip()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    return out


class Settings:
    """Flag > config-file > default resolution for one invocation."""

    def __init__(self, args):
        self._args = vars(args)
        self._config = _read_config(args.config) if getattr(args, "config", None) else {}

    def get(self, key):
        flag = self._args.get(key)
        if flag is not None:
            return flag
        if key in self._config:
            raw = self._config[key]
            if key in _BOOL_KEYS:
                return _parse_bool(raw)
            if key in _INT_KEYS:
                return int(raw)
            if key in _FLOAT_KEYS:
                return float(raw)
            return raw
        return _DEFAULTS[key]


def _float_list(text):
    try:
        return [float(x) for x in str(text).split(",") if x.strip() != ""]
    except ValueError:
        raise UsageError(f"expected a comma-separated number list, got {text!r}") from None


# ---------------------------------------------------------------------------
# tier execution


def _zero_rig(n):
    return [Extrinsics.identity() for _ in range(n)]


def run_single_frame_tier(tier, data, reference, noise, prob_threshold):
    """Per-frame closed form (sfc) or its refinement (sfo)."""
    ext = _zero_rig(data.n_robots)
    rows, errors, times, masks, mask_ts = [], [], [], [], []
    valid = 0
    for frame in data.frames:
        start = time.perf_counter()
        try:
            result, mask, _ = run_sfc(frame, ext, noise, reference, prob_threshold)
            if tier == "sfo":
                result = run_sfo(frame, result, mask, ext, noise)
        except SingleFrameError:
            times.append(1e3 * (time.perf_counter() - start))
            continue
        times.append(1e3 * (time.perf_counter() - start))
        valid += 1
        masks.append(np.array([mask.kept(i) for i in range(len(frame.bearings))], dtype=bool))
        mask_ts.append(frame.timestamp)
        truth = data.relative_truth(reference, frame.timestamp)
        errors.append(metrics.ate_frame(truth, result, reference))
        for j in sorted(result.positions):
            rows.append((frame.timestamp, j, result.positions[j], result.orientations[j]))
    return {
        "tier": tier,
        "rows": rows,
        "errors": errors,
        "valid": valid,
        "total": len(data.frames),
        "times": times,
        "masks": masks,
        "mask_ts": mask_ts,
    }


def run_windowed_tier(tier, data, reference, noise, window, prob_threshold):
    """Streaming inertial smoother (mflo or mfto)."""
    est = MultiFrameEstimator(
        _zero_rig(data.n_robots),
        noise,
        reference=reference,
        window=window,
        tier=tier,
        prob_threshold=prob_threshold,
    )
    rows, errors, times = [], [], []
    valid = 0
    prev_ts = -1
    for frame in data.frames:
        batch = data.imu_batch(prev_ts, frame.timestamp)
        prev_ts = frame.timestamp
        start = time.perf_counter()
        out = est.process_frame(frame, batch)
        times.append(1e3 * (time.perf_counter() - start))
        if out is None:
            continue
        valid += 1
        truth = data.relative_truth(reference, frame.timestamp)
        errors.append(metrics.ate_frame(truth, out, reference))
        for j in sorted(out.positions):
            rows.append((frame.timestamp, j, out.positions[j], out.orientations[j]))
    return {
        "tier": tier,
        "rows": rows,
        "errors": errors,
        "valid": valid,
        "total": len(data.frames),
        "times": times,
        "masks": None,
        "mask_ts": None,
    }


def run_tiers(data, reference, noise, window, prob_threshold, tiers=TIERS):
    out = []
    for tier in tiers:
        if tier in ("sfc", "sfo"):
            out.append(run_single_frame_tier(tier, data, reference, noise, prob_threshold))
        elif tier in ("mflo", "mfto"):
            out.append(run_windowed_tier(tier, data, reference, noise, window, prob_threshold))
        else:
            raise UsageError(f"unknown tier {tier!r}")
    return out


def tier_metric_rows(trial, results, data):
    rows = []
    for res in results:
        tier = res["tier"]
        if res["errors"]:
            pos, rot = metrics.ate_sequence(res["errors"])
            rows.append((trial, tier, "ate_pos", pos))
            rows.append((trial, tier, "ate_rot", rot))
        rows.append((trial, tier, "output_rate", res["valid"] / res["total"]))
        if res["times"]:
            rows.append((trial, tier, "frame_ms", float(np.mean(res["times"]))))
        if res["masks"] and data is not None:
            labels = [data.bearing_truth[ts] for ts in res["mask_ts"]]
            pr = metrics.pr_of_rejection(res["masks"], labels)
            rows.append((trial, tier, "precision", pr.precision))
            rows.append((trial, tier, "recall", pr.recall))
    return rows


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    cfg = Settings(args)
    n = cfg.get("robots")
    duration = cfg.get("duration")
    seed = cfg.get("seed")
    if n < 2:
        raise UsageError("--robots must be at least 2")
    if duration <= 0:
        raise UsageError("--duration must be positive")
    try:
        spec = sim.TrajectorySpec(
            n_robots=n,
            duration=duration,
            control_point_rate=cfg.get("control_point_rate"),
            seed=seed,
        )
        deg = sim.DegradationSpec(
            bearing_missing_rate=cfg.get("missing_rate"),
            bearing_outlier_rate=cfg.get("outlier_rate"),
            anonymous=cfg.get("anonymous"),
            distance_dropout_rate=cfg.get("distance_dropout"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    mode = cfg.get("gravity_mode")
    if mode not in ("absent", "constant", "varying"):
        raise UsageError(f"unknown gravity mode {mode!r}")
    trajectories = sim.generate_trajectories(spec)
    data = sim.synthesize(
        trajectories,
        _zero_rig(n),
        NoiseConfig(),
        rates=sim.SampleRates(imu_hz=cfg.get("imu_hz")),
        degradation=deg,
        seed=seed,
        gravity=mode,
        noise_scale=cfg.get("noise_scale"),
    )
    out = cfg.get("out") or f"dataset_seed{seed}.txt"
    sim.write_dataset(out, data)
    n_bear = sum(len(f.bearings) for f in data.frames)
    print(f"seed {seed}")
    print(f"wrote {out}: {len(data.frames)} frames, {n_bear} bearings, {n} robots")
    return EXIT_OK


def cmd_estimate(args):
    cfg = Settings(args)
    data = sim.read_dataset(args.dataset)
    reference = cfg.get("reference")
    if reference not in range(data.n_robots):
        raise UsageError(
            f"reference robot {reference} not in dataset (ids 0..{data.n_robots - 1})"
        )
    window = cfg.get("window")
    if window < 2:
        raise UsageError("--window must be at least 2")
    thresholds = _float_list(cfg.get("pcm_threshold"))
    if len(thresholds) != 1:
        raise UsageError("estimate takes exactly one --pcm-threshold")
    gravity_on = _parse_bool(cfg.get("gravity"))
    noise = data.noise if gravity_on else NoiseConfig(
        bearing_sigma=data.noise.bearing_sigma,
        distance_sigma=data.noise.distance_sigma,
        gravity_sigma=data.noise.gravity_sigma,
        accel_noise=data.noise.accel_noise,
        gyro_noise=data.noise.gyro_noise,
        gravity_enabled=False,
    )
    tiers = tuple(t.strip() for t in str(cfg.get("tiers")).split(",") if t.strip())
    results = run_tiers(data, reference, noise, window, thresholds[0], tiers)

    if all(res["valid"] == 0 for res in results):
        print("no estimator tier produced any output", file=sys.stderr)
        return EXIT_DATA

    stem = os.path.splitext(args.dataset)[0]
    est_path = cfg.get("out") or f"{stem}.estimates.txt"
    csv_path = f"{stem}.metrics.csv"
    with open(est_path, "w") as fh:
        fh.write(f"# relpose-estimates v1 dataset={os.path.basename(args.dataset)} reference={reference}\n")
        for res in results:
            for ts, j, p, q in res["rows"]:
                fields = [format(float(x), ".9g") for x in (*p, *q)]
                fh.write(f"EST {res['tier']} {j} {ts} " + " ".join(fields) + "\n")
    rows = tier_metric_rows(os.path.basename(args.dataset), results, data)
    metrics.write_metrics_csv(csv_path, rows)

    for res in results:
        if res["errors"]:
            pos, rot = metrics.ate_sequence(res["errors"])
            ate = f"ate {pos:.6g} m / {math.degrees(rot):.6g} deg"
        else:
            ate = "ate n/a"
        rate = res["valid"] / res["total"]
        print(f"{res['tier']}: {ate}, output rate {rate:.3f}")
    print(f"wrote {est_path} and {csv_path}")
    return EXIT_OK


def _benchmark_trial(task):
    """One (sweep point, trial) cell; top level so worker pools can run it."""
    (axis, value, trial_seed, base) = task
    n = int(value) if axis == "robots" else base["robots"]
    window = int(value) if axis == "window" else base["window"]
    missing = float(value) if axis == "missing" else base["missing_rate"]
    outlier = float(value) if axis == "outlier" else base["outlier_rate"]
    anonymous = bool(int(value)) if axis == "anonymous" else base["anonymous"]

    spec = sim.TrajectorySpec(
        n_robots=n,
        duration=base["duration"],
        control_point_rate=base["control_point_rate"],
        seed=trial_seed,
    )
    deg = sim.DegradationSpec(
        bearing_missing_rate=missing,
        bearing_outlier_rate=outlier,
        anonymous=anonymous,
        distance_dropout_rate=base["distance_dropout"],
    )
    noise = NoiseConfig(gravity_enabled=base["gravity_on"])
    data = sim.synthesize(
        sim.generate_trajectories(spec),
        _zero_rig(n),
        noise,
        rates=sim.SampleRates(imu_hz=base["imu_hz"]),
        degradation=deg,
        seed=trial_seed,
        gravity=base["gravity_mode"],
        noise_scale=base["noise_scale"],
    )
    thresholds = base["thresholds"]
    results = run_tiers(data, 0, noise, window, thresholds[0], base["tiers"])
    point = {}
    for trial_label, tier, metric, val in tier_metric_rows("x", results, data):
        point[(tier, metric)] = val
    # rejection quality at every requested threshold
    if (outlier > 0 or anonymous) and len(thresholds) > 1:
        ext = _zero_rig(n)
        for thr in thresholds[1:]:
            masks, labels = [], []
            for frame in data.frames:
                try:
                    _, mask, _ = run_sfc(frame, ext, noise, 0, thr)
                except SingleFrameError:
                    continue
                masks.append(
                    np.array([mask.kept(i) for i in range(len(frame.bearings))], dtype=bool)
                )
                labels.append(data.bearing_truth[frame.timestamp])
            if masks:
                pr = metrics.pr_of_rejection(masks, labels)
                point[("sfc", f"precision@{thr:g}")] = pr.precision
                point[("sfc", f"recall@{thr:g}")] = pr.recall
    return (axis, value, trial_seed, point)


def cmd_benchmark(args):
    cfg = Settings(args)
    axis = cfg.get("axis")
    if axis not in ("robots", "window", "missing", "outlier", "anonymous"):
        raise UsageError("--axis must be one of robots, window, missing, outlier, anonymous")
    raw_values = cfg.get("values")
    if not raw_values:
        raise UsageError("--values is required (comma-separated sweep points)")
    values = _float_list(raw_values)
    trials = cfg.get("trials")
    if trials < 1:
        raise UsageError("--trials must be at least 1")
    base_seed = cfg.get("seed")
    base = {
        "robots": cfg.get("robots"),
        "window": cfg.get("window"),
        "duration": cfg.get("duration"),
        "control_point_rate": cfg.get("control_point_rate"),
        "imu_hz": cfg.get("imu_hz"),
        "missing_rate": cfg.get("missing_rate"),
        "outlier_rate": cfg.get("outlier_rate"),
        "anonymous": cfg.get("anonymous"),
        "distance_dropout": cfg.get("distance_dropout"),
        "noise_scale": cfg.get("noise_scale"),
        "gravity_mode": cfg.get("gravity_mode"),
        "gravity_on": _parse_bool(cfg.get("gravity")),
        "thresholds": _float_list(cfg.get("pcm_threshold")),
        "tiers": tuple(t.strip() for t in str(cfg.get("tiers")).split(",") if t.strip()),
    }

    tasks = [
        (axis, value, base_seed + t, base)
        for value in values
        for t in range(trials)
    ]
    workers = int(os.environ.get("RELPOSE_THREADS", "1") or "1")
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_benchmark_trial, tasks))
    else:
        outcomes = [_benchmark_trial(task) for task in tasks]

    by_point = {}
    for _, value, _, point in outcomes:
        by_point.setdefault(value, []).append(point)
    rows = []
    for value in values:
        label = f"{axis}={value:g}"
        samples = by_point[value]
        keys = sorted({k for point in samples for k in point})
        for tier, metric in keys:
            vals = [point[(tier, metric)] for point in samples if (tier, metric) in point]
            rows.append((label, tier, f"{metric}_mean", float(np.mean(vals))))
            rows.append((label, tier, f"{metric}_std", float(np.std(vals))))
    out = cfg.get("out") or f"benchmark_{axis}.csv"
    metrics.write_metrics_csv(out, rows)
    print(f"swept {axis} over {values} with {trials} trials each")
    print(f"wrote {out} ({len(rows)} rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def _add_common(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="relpose",
        description="relative pose estimation benchmark tool",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize a dataset file")
    _add_common(p)
    p.add_argument("--robots", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--missing-rate", dest="missing_rate", type=float)
    p.add_argument("--outlier-rate", dest="outlier_rate", type=float)
    p.add_argument("--anonymous", action="store_const", const=True, default=None)
    p.add_argument("--distance-dropout", dest="distance_dropout", type=float)
    p.add_argument("--noise-scale", dest="noise_scale", type=float)
    p.add_argument("--gravity-mode", dest="gravity_mode", choices=("absent", "constant", "varying"))
    p.add_argument("--control-point-rate", dest="control_point_rate", type=float)
    p.add_argument("--imu-hz", dest="imu_hz", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="run all estimator tiers over a dataset")
    _add_common(p)
    p.add_argument("dataset")
    p.add_argument("--reference", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--gravity", choices=("on", "off"))
    p.add_argument("--pcm-threshold", dest="pcm_threshold")
    p.add_argument("--tiers")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("benchmark", help="sweep one axis over seeded trials")
    _add_common(p)
    p.add_argument("--axis", choices=("robots", "window", "missing", "outlier", "anonymous"))
    p.add_argument("--values")
    p.add_argument("--trials", type=int)
    p.add_argument("--robots", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--missing-rate", dest="missing_rate", type=float)
    p.add_argument("--outlier-rate", dest="outlier_rate", type=float)
    p.add_argument("--anonymous", action="store_const", const=True, default=None)
    p.add_argument("--distance-dropout", dest="distance_dropout", type=float)
    p.add_argument("--noise-scale", dest="noise_scale", type=float)
    p.add_argument("--gravity-mode", dest="gravity_mode", choices=("absent", "constant", "varying"))
    p.add_argument("--control-point-rate", dest="control_point_rate", type=float)
    p.add_argument("--imu-hz", dest="imu_hz", type=float)
    p.add_argument("--gravity", choices=("on", "off"))
    p.add_argument("--pcm-threshold", dest="pcm_threshold")
    p.add_argument("--tiers")
    p.set_defaults(func=cmd_benchmark)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except sim.DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
