import math

import numpy as np
import pytest

from relpose import core, sim
from relpose.core import Extrinsics, NoiseConfig
from relpose.preintegration import integrate

SEC = 1_000_000_000
UP = np.array([0.0, 0.0, 1.0])
G_WORLD = np.array([0.0, 0.0, -9.8])


def make_trajectory(rng, n_cp=12, knot_dt=2.0, box=5.0):
    pos = rng.uniform(-box, box, size=(n_cp, 3))
    rot = np.stack([core.quat_canonical(rng.standard_normal(4)) for _ in range(n_cp)])
    return sim.Trajectory(pos, rot, knot_dt)


def identity_rig(n):
    return [Extrinsics.identity() for _ in range(n)]


# --- spline oracles -------------------------------------------------------


def test_constant_control_points_give_static_pose():
    p = np.array([1.0, -2.0, 0.5])
    q = core.quat_canonical(np.array([0.9, 0.1, -0.3, 0.2]))
    tr = sim.Trajectory(np.tile(p, (8, 1)), np.tile(q, (8, 1)), 1.0)
    for t in np.linspace(0.0, tr.duration, 23):
        assert np.allclose(tr.pos(t), p, atol=1e-12)
        assert np.allclose(tr.vel(t), 0.0, atol=1e-12)
        assert np.allclose(tr.acc(t), 0.0, atol=1e-12)
        assert np.allclose(tr.quat(t), q, atol=1e-12)
        assert np.allclose(tr.angular_velocity(t), 0.0, atol=1e-12)


def test_position_derivatives_match_central_differences():
    h = 1e-4
    for seed in range(5):
        rng = np.random.default_rng(seed)
        tr = make_trajectory(rng)
        for t in rng.uniform(2 * h, tr.duration - 2 * h, size=25):
            v_fd = (tr.pos(t + h) - tr.pos(t - h)) / (2 * h)
            a_fd = (tr.vel(t + h) - tr.vel(t - h)) / (2 * h)
            assert np.linalg.norm(tr.vel(t) - v_fd) < 1e-6
            assert np.linalg.norm(tr.acc(t) - a_fd) < 1e-6


def test_angular_velocity_matches_quaternion_differences():
    h = 1e-5
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        tr = make_trajectory(rng)
        for t in rng.uniform(2 * h, tr.duration - 2 * h, size=25):
            Ra = tr.rot(t - h)
            Rb = tr.rot(t + h)
            w_fd = core.so3_log(Ra.T @ Rb) / (2 * h)
            assert np.linalg.norm(tr.angular_velocity(t) - w_fd) < 1e-5


def test_spline_is_continuous_across_knots():
    rng = np.random.default_rng(7)
    tr = make_trajectory(rng, knot_dt=0.5)
    eps = 1e-9
    for k in range(1, tr.n_segments):
        t = k * tr.knot_dt
        assert np.linalg.norm(tr.pos(t - eps) - tr.pos(t + eps)) < 1e-6
        dq = core.quat_mul(core.quat_conj(tr.quat(t - eps)), tr.quat(t + eps))
        assert np.linalg.norm(core.quat_log(core.quat_canonical(dq))) < 1e-6


def test_generated_trajectories_stay_inside_volume():
    spec = sim.TrajectorySpec(n_robots=4, duration=20.0, seed=3)
    trs = sim.generate_trajectories(spec)
    assert len(trs) == 4
    half = np.array(spec.volume) / 2
    for tr in trs:
        for t in np.linspace(0.0, spec.duration, 101):
            assert np.all(np.abs(tr.pos(t)) <= half + 1e-9)


def test_trajectory_spec_validation():
    with pytest.raises(ValueError):
        sim.TrajectorySpec(n_robots=1, duration=5.0)
    with pytest.raises(ValueError):
        sim.TrajectorySpec(n_robots=3, duration=0.0)
    with pytest.raises(ValueError):
        sim.DegradationSpec(bearing_missing_rate=1.5)
    with pytest.raises(ValueError):
        sim.DegradationSpec(bearing_outlier_rate=-0.1)


# --- gravity field --------------------------------------------------------


def test_gravity_field_modes():
    absent = sim.variable_gravity_field("absent")
    constant = sim.variable_gravity_field("constant")
    varying = sim.variable_gravity_field("varying", seed=5)
    assert np.allclose(absent(3.0), 0.0)
    assert np.allclose(constant(3.0), [0.0, 0.0, -9.8])
    for t in np.linspace(0.0, 30.0, 40):
        g = varying(t)
        s = varying.position(min(t, 127.9))
        d = np.linalg.norm(s)
        assert abs(np.linalg.norm(g) - 9.8 * d / 5.0) < 1e-9
        if d > 1e-6:
            assert np.allclose(g / np.linalg.norm(g), s / d, atol=1e-9)
    again = sim.variable_gravity_field("varying", seed=5)
    assert np.allclose(varying(12.3), again(12.3))
    with pytest.raises(ValueError):
        sim.variable_gravity_field("sideways")


# --- noiseless synthesis is exact -----------------------------------------


def random_rig(rng, n):
    out = []
    for _ in range(n):
        out.append(
            Extrinsics(
                cam_rotation=core.quat_canonical(rng.standard_normal(4)),
                cam_position=rng.uniform(-0.1, 0.1, 3),
                uwb_position=rng.uniform(-0.1, 0.1, 3),
                marker_position=rng.uniform(-0.05, 0.05, 3),
            )
        )
    return out


def test_zero_noise_measurements_are_exact():
    rng = np.random.default_rng(11)
    spec = sim.TrajectorySpec(n_robots=3, duration=2.0, seed=11)
    trs = sim.generate_trajectories(spec)
    ext = random_rig(rng, 3)
    data = sim.synthesize(trs, ext, NoiseConfig(), seed=11, noise_scale=0.0)
    assert len(data.frames) == 100
    checked = 0
    for frame in data.frames[::7]:
        t = frame.timestamp / SEC
        for dm in frame.distances:
            Ra, Rb = trs[dm.from_robot].rot(t), trs[dm.to_robot].rot(t)
            pa = trs[dm.from_robot].pos(t) + Ra @ ext[dm.from_robot].uwb_position
            pb = trs[dm.to_robot].pos(t) + Rb @ ext[dm.to_robot].uwb_position
            assert abs(dm.distance - np.linalg.norm(pb - pa)) < 1e-10
        for bm in frame.bearings:
            u = sim._true_bearing(trs[bm.observer], trs[bm.target], ext[bm.observer], ext[bm.target], t)
            assert np.linalg.norm(bm.direction - u) < 1e-10
        for gm in frame.gravities:
            body = trs[gm.robot].rot(t).T @ UP
            assert np.linalg.norm(gm.direction - body) < 1e-10
        checked += 1
    assert checked > 10
    for start, labels in data.bearing_truth.items():
        assert labels.all()


def test_frames_sit_on_the_output_grid():
    spec = sim.TrajectorySpec(n_robots=2, duration=1.0, seed=2)
    trs = sim.generate_trajectories(spec)
    data = sim.synthesize(trs, identity_rig(2), NoiseConfig(), seed=2, noise_scale=0.0)
    assert [f.timestamp for f in data.frames] == [k * 20_000_000 for k in range(50)]
    for frame in data.frames:
        # ranges/gravity run at 100 Hz but only the samples within the attach
        # window survive, so every frame carries exactly one full set
        assert len(frame.distances) == 1
        assert len(frame.gravities) == 2
        assert len(frame.bearings) == 2
        assert frame.timestamp in data.truth
    for j in (0, 1):
        ts = np.array([s.timestamp for s in data.imu[j]])
        assert np.all(np.diff(ts) == 10_000_000)
        assert ts[-1] >= data.frames[-1].timestamp


def test_imu_stream_matches_preintegrated_truth():
    spec = sim.TrajectorySpec(n_robots=2, duration=1.2, seed=21)
    trs = sim.generate_trajectories(spec)
    rates = sim.SampleRates(imu_hz=1000.0)
    data = sim.synthesize(trs, identity_rig(2), NoiseConfig(), rates=rates, seed=21, noise_scale=0.0)
    t0, t1 = 0.2, 0.4
    T = t1 - t0
    for j in (0, 1):
        chunk = [s for s in data.imu[j] if t0 * SEC - 1 <= s.timestamp <= t1 * SEC + 1]
        pre = integrate(chunk)
        R0 = trs[j].rot(t0)
        p_pred = trs[j].pos(t0) + trs[j].vel(t0) * T + 0.5 * G_WORLD * T**2 + R0 @ pre.alpha
        v_pred = trs[j].vel(t0) + G_WORLD * T + R0 @ pre.beta
        R_pred = R0 @ core.quat_to_matrix(pre.gamma)
        assert np.linalg.norm(p_pred - trs[j].pos(t1)) < 2e-5
        assert np.linalg.norm(v_pred - trs[j].vel(t1)) < 2e-4
        assert np.linalg.norm(core.so3_log(R_pred.T @ trs[j].rot(t1))) < 1e-5


def test_varying_gravity_shifts_imu_but_not_geometry():
    spec = sim.TrajectorySpec(n_robots=2, duration=1.0, seed=31)
    trs = sim.generate_trajectories(spec)
    const = sim.synthesize(trs, identity_rig(2), NoiseConfig(), seed=31, noise_scale=0.0, gravity="constant")
    vary = sim.synthesize(trs, identity_rig(2), NoiseConfig(), seed=31, noise_scale=0.0, gravity="varying")
    for fa, fb in zip(const.frames, vary.frames):
        for da, db in zip(fa.distances, fb.distances):
            assert abs(da.distance - db.distance) < 1e-12
        for ba, bb in zip(fa.bearings, fb.bearings):
            assert np.allclose(ba.direction, bb.direction)
    diff = max(
        np.linalg.norm(sa.specific_force - sb.specific_force)
        for sa, sb in zip(const.imu[0], vary.imu[0])
    )
    assert diff > 0.5


def test_absent_gravity_emits_no_gravity_measurements():
    spec = sim.TrajectorySpec(n_robots=2, duration=0.5, seed=4)
    trs = sim.generate_trajectories(spec)
    data = sim.synthesize(trs, identity_rig(2), NoiseConfig(), seed=4, gravity="absent", noise_scale=0.0)
    assert all(len(f.gravities) == 0 for f in data.frames)
    arr = np.array([s.specific_force for s in data.imu[0]])
    # the specific force no longer carries the 9.8 bias
    assert np.linalg.norm(arr, axis=1).mean() < 5.0

    disabled = sim.synthesize(
        trs, identity_rig(2), NoiseConfig(gravity_enabled=False), seed=4, noise_scale=0.0
    )
    assert all(len(f.gravities) == 0 for f in disabled.frames)


# --- noise statistics ------------------------------------------------------


def test_bearing_noise_std_matches_sigma():
    noise = NoiseConfig()
    spec = sim.TrajectorySpec(n_robots=10, duration=23.0, seed=42)
    trs = sim.generate_trajectories(spec)
    ext = identity_rig(10)
    data = sim.synthesize(trs, ext, noise, seed=42)
    errors = []
    for frame in data.frames:
        t = frame.timestamp / SEC
        for bm in frame.bearings:
            u = sim._true_bearing(trs[bm.observer], trs[bm.target], ext[bm.observer], ext[bm.target], t)
            errors.append(math.acos(np.clip(bm.direction @ u, -1.0, 1.0)))
        if len(errors) >= 100_000:
            break
    errors = np.array(errors)
    assert len(errors) >= 100_000
    rms = math.sqrt(float(np.mean(errors**2)))
    assert abs(rms - noise.bearing_sigma) < 0.05 * noise.bearing_sigma


def test_distance_noise_std_matches_sigma():
    noise = NoiseConfig()
    spec = sim.TrajectorySpec(n_robots=6, duration=20.0, seed=43)
    trs = sim.generate_trajectories(spec)
    data = sim.synthesize(trs, identity_rig(6), noise, seed=43)
    errs = []
    for frame in data.frames:
        t = frame.timestamp / SEC
        for dm in frame.distances:
            true = np.linalg.norm(trs[dm.to_robot].pos(t) - trs[dm.from_robot].pos(t))
            errs.append(dm.distance - true)
    errs = np.array(errs)
    assert len(errs) > 10_000
    assert abs(errs.std() - noise.distance_sigma) < 0.05 * noise.distance_sigma
    assert abs(errs.mean()) < 0.01


def test_noise_scale_scales_sigmas():
    spec = sim.TrajectorySpec(n_robots=3, duration=6.0, seed=44)
    trs = sim.generate_trajectories(spec)
    noise = NoiseConfig()
    half = sim.synthesize(trs, identity_rig(3), noise, seed=44, noise_scale=0.5)
    errs = []
    for frame in half.frames:
        t = frame.timestamp / SEC
        for dm in frame.distances:
            true = np.linalg.norm(trs[dm.to_robot].pos(t) - trs[dm.from_robot].pos(t))
            errs.append(dm.distance - true)
    assert abs(np.std(errs) - 0.5 * noise.distance_sigma) < 0.1 * 0.5 * noise.distance_sigma


# --- degradation -----------------------------------------------------------


def test_missing_rate_drops_bearings():
    spec = sim.TrajectorySpec(n_robots=6, duration=4.0, seed=50)
    trs = sim.generate_trajectories(spec)
    deg = sim.DegradationSpec(bearing_missing_rate=0.5)
    data = sim.synthesize(trs, identity_rig(6), NoiseConfig(), degradation=deg, seed=50)
    total = sum(len(f.bearings) for f in data.frames)
    expected = 0.5 * len(data.frames) * 6 * 5
    assert abs(total - expected) < 0.07 * expected


def test_outlier_rate_average_count_per_observer():
    # rate 0.5 with ten robots averages 4.5 injected outliers per observer
    spec = sim.TrajectorySpec(n_robots=10, duration=4.0, seed=51)
    trs = sim.generate_trajectories(spec)
    deg = sim.DegradationSpec(bearing_outlier_rate=0.5)
    data = sim.synthesize(trs, identity_rig(10), NoiseConfig(), degradation=deg, seed=51)
    n_outliers = sum((~data.bearing_truth[f.timestamp]).sum() for f in data.frames)
    per_observer = n_outliers / (len(data.frames) * 10)
    assert abs(per_observer - 4.5) < 0.1
    for frame in data.frames[:5]:
        labels = data.bearing_truth[frame.timestamp]
        for bm, ok in zip(frame.bearings, labels):
            assert 0 <= bm.target < 10 and bm.target != bm.observer
            if not ok:
                assert abs(np.linalg.norm(bm.direction) - 1.0) < 1e-9


def test_anonymous_mode_duplicates_under_every_target_id():
    n = 4
    spec = sim.TrajectorySpec(n_robots=n, duration=1.0, seed=52)
    trs = sim.generate_trajectories(spec)
    deg = sim.DegradationSpec(anonymous=True)
    data = sim.synthesize(trs, identity_rig(n), NoiseConfig(), degradation=deg, seed=52)
    for frame in data.frames:
        labels = data.bearing_truth[frame.timestamp]
        assert len(frame.bearings) == n * (n - 1) * (n - 1)
        assert labels.sum() == n * (n - 1)
        for g in range(0, len(frame.bearings), n - 1):
            group = frame.bearings[g : g + n - 1]
            dirs = {tuple(np.round(b.direction, 12)) for b in group}
            assert len(dirs) == 1
            claimed = {b.target for b in group}
            assert claimed == set(range(n)) - {group[0].observer}
            assert labels[g : g + n - 1].sum() <= 1


def test_distance_dropout():
    spec = sim.TrajectorySpec(n_robots=5, duration=4.0, seed=53)
    trs = sim.generate_trajectories(spec)
    deg = sim.DegradationSpec(distance_dropout_rate=0.3)
    data = sim.synthesize(trs, identity_rig(5), NoiseConfig(), degradation=deg, seed=53)
    total = sum(len(f.distances) for f in data.frames)
    expected = 0.7 * len(data.frames) * 10
    assert abs(total - expected) < 0.1 * expected


def test_same_seed_reproduces_streams_exactly():
    spec = sim.TrajectorySpec(n_robots=4, duration=2.0, seed=60)
    deg = sim.DegradationSpec(bearing_missing_rate=0.2, bearing_outlier_rate=0.7, anonymous=True)

    def run():
        trs = sim.generate_trajectories(spec)
        return sim.synthesize(trs, identity_rig(4), NoiseConfig(), degradation=deg, seed=60)

    a, b = run(), run()
    assert len(a.frames) == len(b.frames)
    for fa, fb in zip(a.frames, b.frames):
        assert fa.timestamp == fb.timestamp
        assert len(fa.bearings) == len(fb.bearings)
        for ba, bb in zip(fa.bearings, fb.bearings):
            assert ba.observer == bb.observer and ba.target == bb.target
            assert np.array_equal(ba.direction, bb.direction)
        for da, db in zip(fa.distances, fb.distances):
            assert da.distance == db.distance
        assert np.array_equal(a.bearing_truth[fa.timestamp], b.bearing_truth[fb.timestamp])
    for j in a.imu:
        for sa, sb in zip(a.imu[j], b.imu[j]):
            assert np.array_equal(sa.specific_force, sb.specific_force)
            assert np.array_equal(sa.angular_velocity, sb.angular_velocity)

    other = sim.synthesize(
        sim.generate_trajectories(spec), identity_rig(4), NoiseConfig(), degradation=deg, seed=61
    )
    assert not np.array_equal(
        other.frames[0].bearings[0].direction, a.frames[0].bearings[0].direction
    )


def test_bias_walk_drifts_and_reproduces():
    spec = sim.TrajectorySpec(n_robots=2, duration=4.0, seed=70)
    trs = sim.generate_trajectories(spec)
    clean = sim.synthesize(trs, identity_rig(2), NoiseConfig(), seed=70, noise_scale=0.0)
    walk = NoiseConfig(accel_bias_walk=0.05, gyro_bias_walk=0.02)
    drift = sim.synthesize(trs, identity_rig(2), walk, seed=70, noise_scale=0.0)
    drift2 = sim.synthesize(trs, identity_rig(2), walk, seed=70, noise_scale=0.0)
    assert np.allclose(drift.imu[0][0].specific_force, clean.imu[0][0].specific_force)
    late = np.linalg.norm(
        drift.imu[0][-1].specific_force - clean.imu[0][-1].specific_force
    )
    assert late > 0.01
    assert np.array_equal(drift.imu[0][-1].specific_force, drift2.imu[0][-1].specific_force)


# --- truth access and files -------------------------------------------------


def test_relative_truth_matches_direct_computation():
    spec = sim.TrajectorySpec(n_robots=3, duration=1.0, seed=80)
    trs = sim.generate_trajectories(spec)
    data = sim.synthesize(trs, identity_rig(3), NoiseConfig(), seed=80, noise_scale=0.0)
    ts = data.frames[17].timestamp
    t = ts / SEC
    rel = data.relative_truth(0, ts)
    R0 = trs[0].rot(t)
    for j in (1, 2):
        assert np.allclose(rel[j].position, R0.T @ (trs[j].pos(t) - trs[0].pos(t)), atol=1e-12)
        assert np.allclose(rel[j].velocity, R0.T @ (trs[j].vel(t) - trs[0].vel(t)), atol=1e-12)
        dq = core.quat_mul(core.quat_conj(trs[0].quat(t)), trs[j].quat(t))
        assert np.allclose(rel[j].orientation, core.quat_canonical(dq), atol=1e-12)


def test_imu_batch_slicing():
    spec = sim.TrajectorySpec(n_robots=2, duration=1.0, seed=81)
    trs = sim.generate_trajectories(spec)
    data = sim.synthesize(trs, identity_rig(2), NoiseConfig(), seed=81, noise_scale=0.0)
    batch = data.imu_batch(0, 100_000_000)
    assert all(0 < s.timestamp <= 100_000_000 for s in batch)
    assert len(batch) == 2 * 10


def test_dataset_round_trip(tmp_path):
    spec = sim.TrajectorySpec(n_robots=3, duration=1.0, seed=90)
    trs = sim.generate_trajectories(spec)
    deg = sim.DegradationSpec(bearing_missing_rate=0.1, bearing_outlier_rate=0.5, anonymous=True)
    noise = NoiseConfig(bearing_sigma=0.03, distance_sigma=0.07)
    data = sim.synthesize(trs, identity_rig(3), noise, degradation=deg, seed=90, noise_scale=0.7)
    path = tmp_path / "trial.txt"
    sim.write_dataset(path, data)
    back = sim.read_dataset(path)

    assert back.seed == 90
    assert back.n_robots == 3
    assert back.gravity_mode == "constant"
    assert back.noise_scale == pytest.approx(0.7)
    assert back.noise.bearing_sigma == pytest.approx(0.03)
    assert back.noise.distance_sigma == pytest.approx(0.07)
    assert back.degradation == deg

    assert len(back.frames) == len(data.frames)
    for fa, fb in zip(data.frames, back.frames):
        assert fa.timestamp == fb.timestamp
        assert len(fa.bearings) == len(fb.bearings)
        for ba, bb in zip(fa.bearings, fb.bearings):
            assert (ba.observer, ba.target) == (bb.observer, bb.target)
            assert np.allclose(ba.direction, bb.direction, rtol=1e-7, atol=1e-9)
        for da, db in zip(fa.distances, fb.distances):
            assert (da.from_robot, da.to_robot) == (db.from_robot, db.to_robot)
            assert da.distance == pytest.approx(db.distance, rel=1e-8)
        for ga, gb in zip(fa.gravities, fb.gravities):
            assert ga.robot == gb.robot
            assert np.allclose(ga.direction, gb.direction, rtol=1e-7, atol=1e-9)
        assert np.array_equal(data.bearing_truth[fa.timestamp], back.bearing_truth[fb.timestamp])

    for j in data.imu:
        assert len(data.imu[j]) == len(back.imu[j])
        for sa, sb in zip(data.imu[j], back.imu[j]):
            assert sa.timestamp == sb.timestamp
            assert np.allclose(sa.specific_force, sb.specific_force, rtol=1e-8, atol=1e-8)
            assert np.allclose(sa.angular_velocity, sb.angular_velocity, rtol=1e-8, atol=1e-8)

    for ts in data.truth:
        for j in data.truth[ts]:
            sa, sb = data.truth[ts][j], back.truth[ts][j]
            assert np.allclose(sa.position, sb.position, rtol=1e-8, atol=1e-8)
            assert np.allclose(sa.velocity, sb.velocity, rtol=1e-8, atol=1e-8)
            assert np.allclose(sa.orientation, sb.orientation, rtol=1e-7, atol=1e-8)

    with pytest.raises(ValueError):
        bad = tmp_path / "bad.txt"
        bad.write_text("not a dataset\n")
        sim.read_dataset(bad)
