"""Synthetic multi-robot trajectories, sensors, and dataset files.

Each robot flies a random SE(3) spline: positions follow a cubic uniform
B-spline with control points drawn uniformly inside an axis-aligned box,
orientations follow the cumulative-basis B-spline on the rotation group with
uniformly random control rotations. Both expose exact derivatives, so IMU
synthesis needs no numerical differentiation.

Measurements are sampled along the splines: camera bearings on the frame
grid, ranges / gravity directions / IMU at their own rates (range and
gravity samples attach to the nearest frame within 5 ms). Degradation --
random bearing dropout, uniform-sphere outlier bearings with random claimed
ids, anonymity expansion -- is applied after synthesis, and every bearing
keeps a ground-truth label so detector precision/recall can be scored
exactly.

Generation is a pure function of (spec, seed); the same seed reproduces the
streams bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import (
    BearingMeasurement,
    DistanceMeasurement,
    Extrinsics,
    GravityMeasurement,
    ImuSample,
    MeasurementFrame,
    NoiseConfig,
    RobotState,
)

__all__ = [
    "TrajectorySpec",
    "DegradationSpec",
    "SampleRates",
    "Trajectory",
    "GravityField",
    "SimData",
    "DatasetError",
    "generate_trajectories",
    "variable_gravity_field",
    "perturb_direction",
    "synthesize",
    "write_dataset",
    "read_dataset",
]


class DatasetError(ValueError):
    """A dataset file could not be parsed; carries the offending line number."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line

SEC = 1_000_000_000
ATTACH_WINDOW_NS = 5_000_000  # range/gravity samples join a frame within 5 ms

# cubic uniform B-spline: p(u) = [1,u,u^2,u^3] @ _POS_BASIS @ [c0..c3]
_POS_BASIS = np.array(
    [
        [1.0, 4.0, 1.0, 0.0],
        [-3.0, 0.0, 3.0, 0.0],
        [3.0, -6.0, 3.0, 0.0],
        [-1.0, 3.0, -3.0, 1.0],
    ]
) / 6.0


def _cum_basis(u):
    return np.array(
        [
            (u**3 - 3 * u**2 + 3 * u + 5) / 6.0,
            (-2 * u**3 + 3 * u**2 + 3 * u + 1) / 6.0,
            u**3 / 6.0,
        ]
    )


def _cum_basis_du(u):
    return np.array(
        [
            (3 * u**2 - 6 * u + 3) / 6.0,
            (-6 * u**2 + 6 * u + 3) / 6.0,
            3 * u**2 / 6.0,
        ]
    )


@dataclass(frozen=True)
class TrajectorySpec:
    n_robots: int
    duration: float
    volume: tuple = (10.0, 10.0, 10.0)
    control_point_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_robots < 2:
            raise ValueError("need at least 2 robots")
        if not (self.duration > 0):
            raise ValueError("duration must be positive")
        if not (self.control_point_rate > 0):
            raise ValueError("control point rate must be positive")


@dataclass(frozen=True)
class DegradationSpec:
    bearing_missing_rate: float = 0.0
    bearing_outlier_rate: float = 0.0
    anonymous: bool = False
    distance_dropout_rate: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.bearing_missing_rate <= 1.0):
            raise ValueError("bearing_missing_rate must lie in [0,1]")
        if self.bearing_outlier_rate < 0.0:
            raise ValueError("bearing_outlier_rate must be >= 0")
        if not (0.0 <= self.distance_dropout_rate <= 1.0):
            raise ValueError("distance_dropout_rate must lie in [0,1]")


@dataclass(frozen=True)
class SampleRates:
    bearing_hz: float = 50.0
    distance_hz: float = 100.0
    gravity_hz: float = 100.0
    imu_hz: float = 100.0


class Trajectory:
    """One robot's continuous pose from position + rotation control points."""

    def __init__(self, pos_cps, rot_cps, knot_dt, duration=None):
        self.pos_cps = np.asarray(pos_cps, dtype=float)
        self.rot_cps = np.asarray(rot_cps, dtype=float)
        if len(self.pos_cps) != len(self.rot_cps) or len(self.pos_cps) < 4:
            raise ValueError("need matching position/rotation control points, >= 4")
        self.knot_dt = float(knot_dt)
        self.n_segments = len(self.pos_cps) - 3
        self.duration = self.n_segments * self.knot_dt
        if duration is not None:
            if duration > self.duration + 1e-9:
                raise ValueError("duration exceeds the spline domain")
            self.duration = float(duration)
        # per-knot rotation increments in the local frame, shortest geodesic
        omegas = []
        for k in range(len(self.rot_cps) - 1):
            dq = core.quat_mul(core.quat_conj(self.rot_cps[k]), self.rot_cps[k + 1])
            omegas.append(core.quat_log(core.quat_canonical(dq)))
        self._omegas = np.array(omegas)

    def _segment(self, t):
        x = t / self.knot_dt
        i = int(math.floor(x))
        i = min(max(i, 0), self.n_segments - 1)
        return i, x - i

    def pos(self, t):
        i, u = self._segment(t)
        w = np.array([1.0, u, u * u, u**3]) @ _POS_BASIS
        return w @ self.pos_cps[i : i + 4]

    def vel(self, t):
        i, u = self._segment(t)
        w = np.array([0.0, 1.0, 2 * u, 3 * u * u]) @ _POS_BASIS
        return (w @ self.pos_cps[i : i + 4]) / self.knot_dt

    def acc(self, t):
        i, u = self._segment(t)
        w = np.array([0.0, 0.0, 2.0, 6 * u]) @ _POS_BASIS
        return (w @ self.pos_cps[i : i + 4]) / self.knot_dt**2

    def quat(self, t):
        i, u = self._segment(t)
        B = _cum_basis(u)
        q = self.rot_cps[i]
        for j in range(3):
            q = core.quat_mul(q, core.quat_exp(B[j] * self._omegas[i + j]))
        return core.quat_canonical(q)

    def rot(self, t):
        return core.quat_to_matrix(self.quat(t))

    def angular_velocity(self, t):
        """Body-frame rate: accumulate each factor's axis-rate, rotated back
        through the factors that follow it."""
        i, u = self._segment(t)
        B, dB = _cum_basis(u), _cum_basis_du(u)
        w = np.zeros(3)
        for j in range(3):
            Aj = core.so3_exp(B[j] * self._omegas[i + j])
            w = Aj.T @ w + dB[j] * self._omegas[i + j]
        return w / self.knot_dt


def generate_trajectories(spec: TrajectorySpec) -> list:
    rng = np.random.default_rng(spec.seed)
    n_cp = int(math.ceil(spec.duration * spec.control_point_rate)) + 3
    half = 0.5 * np.asarray(spec.volume, dtype=float)
    knot_dt = 1.0 / spec.control_point_rate
    out = []
    for _ in range(spec.n_robots):
        pos_cps = rng.uniform(-half, half, size=(n_cp, 3))
        rot_cps = np.stack(
            [core.quat_canonical(rng.standard_normal(4)) for _ in range(n_cp)]
        )
        out.append(Trajectory(pos_cps, rot_cps, knot_dt, duration=spec.duration))
    return out


@dataclass
class GravityField:
    """World gravitational acceleration as a function of time.

    The field is spatially uniform at each instant (all robots see the same
    vector), which is exactly the property that keeps relative estimation
    well-posed without knowing the field.
    """

    mode: str
    _fn: callable = field(repr=False, default=None)
    position: callable = field(repr=False, default=None)

    def __call__(self, t, position=None):
        return self._fn(t)


def variable_gravity_field(mode: str, seed: int = 0) -> GravityField:
    if mode == "absent":
        return GravityField(mode, lambda t: np.zeros(3))
    if mode == "constant":
        g = np.array([0.0, 0.0, -9.8])
        return GravityField(mode, lambda t: g.copy())
    if mode == "varying":
        # one shared random position spline; the field points at the sampled
        # point with magnitude 9.8 * (|s| / 5), i.e. g(t) = 1.96 * s(t)
        rng = np.random.default_rng([seed, 0x67])
        n_cp = 64
        pos_cps = rng.uniform(-5.0, 5.0, size=(n_cp, 3))
        rot_cps = np.tile(core.quat_identity(), (n_cp, 1))
        spline = Trajectory(pos_cps, rot_cps, 2.0)

        def fn(t):
            return 1.96 * spline.pos(min(t, spline.duration - 1e-9))

        return GravityField(mode, fn, position=spline.pos)
    raise ValueError(f"unknown gravity mode {mode!r}")


def perturb_direction(rng, direction, sigma):
    """Rotate a unit vector about a uniform perpendicular axis by N(0, sigma^2)."""
    if sigma <= 0.0:
        return np.asarray(direction, dtype=float)
    basis = core.sphere_tangent_basis(direction)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    axis = math.cos(phi) * basis[:, 0] + math.sin(phi) * basis[:, 1]
    ang = rng.normal(0.0, sigma)
    return core.so3_exp(axis * ang) @ direction


@dataclass
class SimData:
    """One synthesized trial: measurement frames, IMU streams, ground truth."""

    frames: list
    imu: dict  # robot id -> list[ImuSample]
    truth: dict  # timestamp -> robot id -> RobotState (world frame)
    bearing_truth: dict  # timestamp -> bool array aligned with frame.bearings
    noise: NoiseConfig
    seed: int
    gravity_mode: str
    degradation: DegradationSpec
    n_robots: int
    noise_scale: float = 1.0
    trajectories: list = None

    def imu_batch(self, after_ns: int, upto_ns: int) -> list:
        """All robots' samples with timestamp in (after, upto]."""
        out = []
        for j in sorted(self.imu):
            out.extend(s for s in self.imu[j] if after_ns < s.timestamp <= upto_ns)
        return out

    def relative_truth(self, reference: int, ts: int) -> dict:
        """True robocentric states of all non-reference robots at a frame time."""
        world = self.truth[ts]
        ref = world[reference]
        Rr = core.quat_to_matrix(ref.orientation)
        out = {}
        for j, s in world.items():
            if j == reference:
                continue
            out[j] = RobotState(
                Rr.T @ (s.position - ref.position),
                Rr.T @ (s.velocity - ref.velocity),
                core.quat_canonical(
                    core.quat_mul(core.quat_conj(ref.orientation), s.orientation)
                ),
            )
        return out


def _true_bearing(tr_o, tr_t, ext_o, ext_t, t):
    Ro, Rt = tr_o.rot(t), tr_t.rot(t)
    Rc = core.quat_to_matrix(ext_o.cam_rotation)
    d = (
        tr_t.pos(t)
        + Rt @ ext_t.marker_position
        - tr_o.pos(t)
        - Ro @ ext_o.cam_position
    )
    u = Rc.T @ (Ro.T @ d)
    return u / np.linalg.norm(u)


def synthesize(
    trajectories,
    extrinsics,
    noise: NoiseConfig,
    rates: SampleRates | None = None,
    degradation: DegradationSpec | None = None,
    seed: int = 0,
    gravity="constant",
    noise_scale: float = 1.0,
) -> SimData:
    """Sample sensors along the trajectories and apply degradation.

    ``noise_scale`` multiplies every synthesis sigma (0 = noiseless draws)
    while ``noise`` itself keeps the estimator-side whitening values. IMU
    noise sigmas are per-sample standard deviations, the same convention the
    preintegration covariance uses.
    """
    n = len(trajectories)
    if len(extrinsics) != n:
        raise ValueError("one extrinsics entry per robot")
    rates = rates or SampleRates()
    deg = degradation or DegradationSpec()
    gfield = gravity if isinstance(gravity, GravityField) else variable_gravity_field(gravity, seed)
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    rng = np.random.default_rng([seed, 0x1])

    duration = min(tr.duration for tr in trajectories)
    n_frames = int(round(duration * rates.bearing_hz))
    frame_ts = [int(round(k / rates.bearing_hz * SEC)) for k in range(n_frames)]
    ts_index = {ts: k for k, ts in enumerate(frame_ts)}

    def nearest_frame(ts):
        k = int(round(ts * rates.bearing_hz / SEC))
        if 0 <= k < n_frames and abs(frame_ts[k] - ts) <= ATTACH_WINDOW_NS:
            return k
        return None

    dists = [[] for _ in range(n_frames)]
    bears = [[] for _ in range(n_frames)]
    gravs = [[] for _ in range(n_frames)]
    labels = [[] for _ in range(n_frames)]

    sig_d = noise_scale * noise.distance_sigma
    sig_b = noise_scale * noise.bearing_sigma
    sig_g = noise_scale * noise.gravity_sigma
    sig_a = noise_scale * noise.accel_noise
    sig_w = noise_scale * noise.gyro_noise

    pose_cache = {}

    def poses_at(t):
        got = pose_cache.get(t)
        if got is None:
            got = [(tr.rot(t), tr.pos(t)) for tr in trajectories]
            pose_cache[t] = got
        return got

    # ranges at their own rate, attached to the frame grid
    n_dist = int(round(duration * rates.distance_hz))
    for k in range(n_dist):
        t = k / rates.distance_hz
        ts = int(round(t * SEC))
        fi = nearest_frame(ts)
        if fi is None:
            continue
        poses = poses_at(t)
        anchors = [p + R @ extrinsics[j].uwb_position for j, (R, p) in enumerate(poses)]
        for a in range(n):
            for b in range(a + 1, n):
                d = float(np.linalg.norm(anchors[b] - anchors[a]))
                if sig_d > 0:
                    d += rng.normal(0.0, sig_d)
                if deg.distance_dropout_rate > 0 and rng.random() < deg.distance_dropout_rate:
                    continue
                dists[fi].append(DistanceMeasurement(a, b, max(d, 1e-6), ts))

    # gravity directions (none when the field is absent)
    if gfield.mode != "absent" and noise.gravity_enabled:
        n_grav = int(round(duration * rates.gravity_hz))
        for k in range(n_grav):
            t = k / rates.gravity_hz
            ts = int(round(t * SEC))
            fi = nearest_frame(ts)
            if fi is None:
                continue
            g = gfield(t)
            gn = np.linalg.norm(g)
            if gn < 1e-9:
                continue
            up = -g / gn  # measured reaction direction opposes the field
            poses = poses_at(t)
            for j in range(n):
                body = poses[j][0].T @ up
                gravs[fi].append(
                    GravityMeasurement(j, perturb_direction(rng, body, sig_g), ts)
                )

    cam_rots = [core.quat_to_matrix(e.cam_rotation) for e in extrinsics]

    # bearings on the frame grid, then degradation
    for fi, ts in enumerate(frame_ts):
        t = ts / SEC
        poses = poses_at(t)
        eyes = [p + R @ extrinsics[j].cam_position for j, (R, p) in enumerate(poses)]
        marks = [p + R @ extrinsics[j].marker_position for j, (R, p) in enumerate(poses)]
        raw = []  # (observer, true target, direction, is_true)
        for o in range(n):
            for tg in range(n):
                if tg == o:
                    continue
                if deg.bearing_missing_rate > 0 and rng.random() < deg.bearing_missing_rate:
                    continue
                u = cam_rots[o].T @ (poses[o][0].T @ (marks[tg] - eyes[o]))
                u /= np.linalg.norm(u)
                raw.append((o, tg, perturb_direction(rng, u, sig_b), True))
            if deg.bearing_outlier_rate > 0:
                target_count = deg.bearing_outlier_rate * (n - 1)
                count = int(math.floor(target_count))
                if rng.random() < target_count - count:
                    count += 1
                for _ in range(count):
                    v = rng.standard_normal(3)
                    v /= np.linalg.norm(v)
                    claimed = int(rng.integers(0, n - 1))
                    if claimed >= o:
                        claimed += 1
                    raw.append((o, claimed, v, False))
        for o, tg, u, is_true in raw:
            if deg.anonymous:
                for claimed in range(n):
                    if claimed == o:
                        continue
                    bears[fi].append(BearingMeasurement(o, claimed, u, ts))
                    labels[fi].append(is_true and claimed == tg)
            else:
                bears[fi].append(BearingMeasurement(o, tg, u, ts))
                labels[fi].append(is_true)

    # IMU streams, with optional random-walk biases
    imu = {}
    n_imu = int(round(duration * rates.imu_hz)) + 1
    imu_dt = 1.0 / rates.imu_hz
    for j in range(n):
        tr = trajectories[j]
        samples = []
        b_a, b_w = np.zeros(3), np.zeros(3)
        for k in range(n_imu):
            t = min(k * imu_dt, duration - 1e-12)
            R = tr.rot(t)
            f = R.T @ (tr.acc(t) - gfield(t)) + b_a
            w = tr.angular_velocity(t) + b_w
            if sig_a > 0:
                f = f + rng.normal(0.0, sig_a, 3)
            if sig_w > 0:
                w = w + rng.normal(0.0, sig_w, 3)
            samples.append(ImuSample(j, int(round(k * imu_dt * SEC)), f, w))
            if noise.accel_bias_walk > 0:
                b_a = b_a + rng.normal(0.0, noise.accel_bias_walk * math.sqrt(imu_dt), 3)
            if noise.gyro_bias_walk > 0:
                b_w = b_w + rng.normal(0.0, noise.gyro_bias_walk * math.sqrt(imu_dt), 3)
        imu[j] = samples

    truth = {}
    for ts in frame_ts:
        t = ts / SEC
        truth[ts] = {
            j: RobotState(
                trajectories[j].pos(t),
                trajectories[j].vel(t),
                trajectories[j].quat(t),
            )
            for j in range(n)
        }

    frames = [
        MeasurementFrame(ts, dists[fi], bears[fi], gravs[fi])
        for fi, ts in enumerate(frame_ts)
    ]
    bearing_truth = {ts: np.array(labels[fi], dtype=bool) for fi, ts in enumerate(frame_ts)}
    return SimData(
        frames=frames,
        imu=imu,
        truth=truth,
        bearing_truth=bearing_truth,
        noise=noise,
        seed=seed,
        gravity_mode=gfield.mode,
        degradation=deg,
        n_robots=n,
        noise_scale=noise_scale,
        trajectories=list(trajectories),
    )


# ---------------------------------------------------------------------------
# dataset files
#
# Line-delimited records, 9 significant digits, SI units, int-ns timestamps:
#   DIST  a b ts range
#   BEAR  observer claimed_target ts ux uy uz label   (label 1 = true bearing)
#   GRAV  robot ts gx gy gz
#   IMU   robot ts fx fy fz wx wy wz
#   TRUTH robot ts px py pz qw qx qy qz vx vy vz      (world frame)
# The header line carries the noise configuration, seed, and degradation.


def _fmt(x):
    return format(float(x), ".9g")


def write_dataset(path, sim: SimData) -> None:
    deg = sim.degradation
    header = (
        "# relpose-dataset v1"
        f" seed={sim.seed}"
        f" n={sim.n_robots}"
        f" gravity_mode={sim.gravity_mode}"
        f" noise_scale={_fmt(sim.noise_scale)}"
        f" bearing_sigma={_fmt(sim.noise.bearing_sigma)}"
        f" distance_sigma={_fmt(sim.noise.distance_sigma)}"
        f" gravity_sigma={_fmt(sim.noise.gravity_sigma)}"
        f" accel_noise={_fmt(sim.noise.accel_noise)}"
        f" gyro_noise={_fmt(sim.noise.gyro_noise)}"
        f" gravity_enabled={int(sim.noise.gravity_enabled)}"
        f" missing={_fmt(deg.bearing_missing_rate)}"
        f" outlier={_fmt(deg.bearing_outlier_rate)}"
        f" anonymous={int(deg.anonymous)}"
        f" distance_dropout={_fmt(deg.distance_dropout_rate)}"
    )
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for frame in sim.frames:
            labels = sim.bearing_truth[frame.timestamp]
            for dm in frame.distances:
                fh.write(f"DIST {dm.from_robot} {dm.to_robot} {dm.timestamp} {_fmt(dm.distance)}\n")
            for bm, lab in zip(frame.bearings, labels):
                d = bm.direction
                fh.write(
                    f"BEAR {bm.observer} {bm.target} {bm.timestamp} "
                    f"{_fmt(d[0])} {_fmt(d[1])} {_fmt(d[2])} {int(lab)}\n"
                )
            for gm in frame.gravities:
                d = gm.direction
                fh.write(
                    f"GRAV {gm.robot} {gm.timestamp} {_fmt(d[0])} {_fmt(d[1])} {_fmt(d[2])}\n"
                )
            for j in sorted(sim.truth[frame.timestamp]):
                s = sim.truth[frame.timestamp][j]
                q, p, v = s.orientation, s.position, s.velocity
                fh.write(
                    f"TRUTH {j} {frame.timestamp} "
                    f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} "
                    f"{_fmt(q[0])} {_fmt(q[1])} {_fmt(q[2])} {_fmt(q[3])} "
                    f"{_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}\n"
                )
        for j in sorted(sim.imu):
            for s in sim.imu[j]:
                f, w = s.specific_force, s.angular_velocity
                fh.write(
                    f"IMU {j} {s.timestamp} "
                    f"{_fmt(f[0])} {_fmt(f[1])} {_fmt(f[2])} "
                    f"{_fmt(w[0])} {_fmt(w[1])} {_fmt(w[2])}\n"
                )


def read_dataset(path) -> SimData:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# relpose-dataset v1"):
            raise DatasetError(1, "not a dataset file (missing header)")
        kv = {}
        for token in header.split()[3:]:
            key, _, value = token.partition("=")
            kv[key] = value
        try:
            noise = NoiseConfig(
                bearing_sigma=float(kv["bearing_sigma"]),
                distance_sigma=float(kv["distance_sigma"]),
                gravity_sigma=float(kv["gravity_sigma"]),
                accel_noise=float(kv["accel_noise"]),
                gyro_noise=float(kv["gyro_noise"]),
                gravity_enabled=bool(int(kv["gravity_enabled"])),
            )
            deg = DegradationSpec(
                bearing_missing_rate=float(kv["missing"]),
                bearing_outlier_rate=float(kv["outlier"]),
                anonymous=bool(int(kv["anonymous"])),
                distance_dropout_rate=float(kv["distance_dropout"]),
            )
        except (KeyError, ValueError) as exc:
            raise DatasetError(1, f"bad header: {exc}") from None
        by_ts = {}
        imu = {}
        truth = {}
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            try:
                if tag == "DIST":
                    a, b, ts = int(parts[1]), int(parts[2]), int(parts[3])
                    rec = by_ts.setdefault(ts, ([], [], [], []))
                    rec[0].append(DistanceMeasurement(a, b, float(parts[4]), ts))
                elif tag == "BEAR":
                    o, tg, ts = int(parts[1]), int(parts[2]), int(parts[3])
                    u = np.array([float(parts[4]), float(parts[5]), float(parts[6])])
                    rec = by_ts.setdefault(ts, ([], [], [], []))
                    rec[1].append(BearingMeasurement(o, tg, u, ts))
                    rec[3].append(bool(int(parts[7])))
                elif tag == "GRAV":
                    j, ts = int(parts[1]), int(parts[2])
                    u = np.array([float(parts[3]), float(parts[4]), float(parts[5])])
                    rec = by_ts.setdefault(ts, ([], [], [], []))
                    rec[2].append(GravityMeasurement(j, u, ts))
                elif tag == "IMU":
                    j, ts = int(parts[1]), int(parts[2])
                    f = np.array([float(parts[3]), float(parts[4]), float(parts[5])])
                    w = np.array([float(parts[6]), float(parts[7]), float(parts[8])])
                    imu.setdefault(j, []).append(ImuSample(j, ts, f, w))
                elif tag == "TRUTH":
                    j, ts = int(parts[1]), int(parts[2])
                    vals = [float(x) for x in parts[3:]]
                    if len(vals) != 10:
                        raise ValueError("TRUTH record needs 10 payload fields")
                    truth.setdefault(ts, {})[j] = RobotState(
                        np.array(vals[0:3]), np.array(vals[7:10]), np.array(vals[3:7])
                    )
                else:
                    raise ValueError(f"unknown record tag {tag!r}")
            except DatasetError:
                raise
            except (ValueError, IndexError) as exc:
                raise DatasetError(lineno, str(exc)) from None

        frame_ts = sorted(truth)
        frames = []
        bearing_truth = {}
        for ts in frame_ts:
            d, b, g, lab = by_ts.get(ts, ([], [], [], []))
            frames.append(MeasurementFrame(ts, d, b, g))
            bearing_truth[ts] = np.array(lab, dtype=bool)
        n = max(len(v) for v in truth.values()) if truth else 0
        return SimData(
            frames=frames,
            imu={j: imu.get(j, []) for j in sorted(imu)},
            truth=truth,
            bearing_truth=bearing_truth,
            noise=noise,
            seed=int(kv["seed"]),
            gravity_mode=kv["gravity_mode"],
            degradation=deg,
            n_robots=n,
            noise_scale=float(kv["noise_scale"]),
        )
