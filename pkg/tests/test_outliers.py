import itertools
import math

import numpy as np
import pytest

from relpose import core, outliers
from relpose.core import BearingMeasurement, MeasurementFrame, NoiseConfig
from conftest import make_scene, perturb_direction


def test_two_sided_quantile():
    assert abs(outliers.two_sided_z(0.95) - 1.959964) < 1e-5
    assert outliers.two_sided_z(0.99) > outliers.two_sided_z(0.95)
    with pytest.raises(ValueError):
        outliers.two_sided_z(1.0)


def test_bearing_pair_angle_hand_values():
    x = np.array([1.0, 0.0, 0.0])
    y = np.array([0.0, 1.0, 0.0])
    assert abs(outliers.bearing_pair_angle(x, y) - math.pi / 2) < 1e-12
    assert abs(outliers.bearing_pair_angle(x, x)) < 1e-12
    assert abs(outliers.bearing_pair_angle(x, -x) - math.pi) < 1e-12


def test_position_pair_angle_hand_values():
    pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 2.0, 0]])
    th, sig = outliers.position_pair_angle(pos, 0, 1, 2, 0.1)
    assert abs(th - math.pi / 2) < 1e-12
    assert abs(sig - math.hypot(0.1 / 1.0, 0.1 / 2.0)) < 1e-12
    # floor
    _, sig = outliers.position_pair_angle(pos * 1e4, 0, 1, 2, 1e-9)
    assert sig == outliers.MIN_ANGLE_SIGMA
    with pytest.raises(ValueError):
        outliers.position_pair_angle(pos, 0, 1, 1, 0.1)


def brute_force_max_clique(adj):
    n = len(adj)
    best = []
    for r in range(n, 0, -1):
        for sub in itertools.combinations(range(n), r):
            if all(adj[a][b] for a, b in itertools.combinations(sub, 2)):
                return list(sub), r
    return best, 0


def test_max_clique_exact_against_brute_force():
    rng = np.random.default_rng(30)
    for _ in range(40):
        n = rng.integers(2, 13)
        adj = rng.random((n, n)) < rng.uniform(0.2, 0.8)
        adj = np.triu(adj, 1)
        adj = adj | adj.T
        got = outliers.max_clique(adj)
        _, want_size = brute_force_max_clique(adj)
        assert len(got) == want_size
        for a, b in itertools.combinations(got, 2):
            assert adj[a, b]


def test_max_clique_tie_break_minimal_stats():
    # two disjoint triangles: {0,1,2} with heavy stats, {3,4,5} light
    adj = np.zeros((6, 6), dtype=bool)
    stats = np.zeros((6, 6))
    for a, b in [(0, 1), (0, 2), (1, 2)]:
        adj[a, b] = adj[b, a] = True
        stats[a, b] = stats[b, a] = 1.5
    for a, b in [(3, 4), (3, 5), (4, 5)]:
        adj[a, b] = adj[b, a] = True
        stats[a, b] = stats[b, a] = 0.1
    assert outliers.max_clique(adj, stats) == [3, 4, 5]


def _exact_frame(scene, observer=0):
    bears = [
        BearingMeasurement(observer, j, scene.bearing_dir(observer, j), 0)
        for j in range(scene.n)
        if j != observer
    ]
    return bears


def test_rotated_bearing_excluded():
    rng = np.random.default_rng(31)
    scene = make_scene(rng, n=10)
    noise = NoiseConfig()
    bears = _exact_frame(scene)
    # rotate the bearing toward robot 5 by 30 degrees
    bad = list(bears)
    u = bad[4].direction
    axis = core.sphere_tangent_basis(u)[:, 0]
    bad[4] = BearingMeasurement(0, 5, core.so3_exp(math.radians(30) * axis) @ u, 0)
    frame = MeasurementFrame(0, (), bad, ())
    mask = outliers.reject_outliers(frame, scene.P, noise)
    assert not mask.kept(4)
    assert all(mask.kept(i) for i in range(len(bad)) if i != 4)


def test_pass_through_for_single_bearing():
    rng = np.random.default_rng(32)
    scene = make_scene(rng, n=4)
    frame = MeasurementFrame(
        0, (), [BearingMeasurement(0, 1, scene.bearing_dir(0, 1), 0)], ()
    )
    mask = outliers.reject_outliers(frame, scene.P, NoiseConfig())
    assert mask.weights.tolist() == [1.0]


def test_threshold_monotonicity():
    rng = np.random.default_rng(33)
    scene = make_scene(rng, n=8)
    noise = NoiseConfig()
    bears = []
    for j in range(1, 8):
        u = perturb_direction(scene.bearing_dir(0, j), noise.bearing_sigma, rng)
        bears.append((len(bears), BearingMeasurement(0, j, u, 0)))
    for lo, hi in [(0.5, 0.9), (0.9, 0.99), (0.99, 0.9999)]:
        adj_lo, _ = outliers.build_consistency_graph(
            bears, scene.P, noise, outliers.two_sided_z(lo)
        )
        adj_hi, _ = outliers.build_consistency_graph(
            bears, scene.P, noise, outliers.two_sided_z(hi)
        )
        assert np.all(adj_hi | ~adj_lo)  # lo-edges subset of hi-edges


def test_anonymous_duplicates_mutually_exclusive():
    rng = np.random.default_rng(34)
    scene = make_scene(rng, n=5)
    noise = NoiseConfig()
    bears = []
    truth_idx = []
    for j in range(1, 5):
        u = scene.bearing_dir(0, j)
        for claimed in range(1, 5):
            if claimed == j:
                truth_idx.append(len(bears))
            bears.append(BearingMeasurement(0, claimed, u, 0))
    frame = MeasurementFrame(0, (), bears, ())
    mask = outliers.reject_outliers(frame, scene.P, noise)
    assert sorted(mask.kept_indices.tolist()) == sorted(truth_idx)


def test_unknown_target_dropped():
    rng = np.random.default_rng(35)
    scene = make_scene(rng, n=4)
    bears = _exact_frame(scene)
    bears.append(BearingMeasurement(0, 17, np.array([0.0, 0.0, 1.0]), 0))
    frame = MeasurementFrame(0, (), bears, ())
    mask = outliers.reject_outliers(frame, scene.P, NoiseConfig())
    assert not mask.kept(len(bears) - 1)
    assert np.sum(mask.weights) == len(bears) - 1


def test_rejection_deterministic():
    rng = np.random.default_rng(36)
    scene = make_scene(rng, n=9)
    noise = NoiseConfig()
    bears = []
    for j in range(1, 9):
        bears.append(
            BearingMeasurement(0, j, perturb_direction(scene.bearing_dir(0, j), 0.03, rng), 0)
        )
    for _ in range(4):  # outliers
        v = rng.standard_normal(3)
        bears.append(BearingMeasurement(0, int(rng.integers(1, 9)), v / np.linalg.norm(v), 0))
    frame = MeasurementFrame(0, (), bears, ())
    m1 = outliers.reject_outliers(frame, scene.P, noise)
    m2 = outliers.reject_outliers(frame, scene.P, noise)
    assert np.array_equal(m1.weights, m2.weights)


def test_precision_recall_smoke():
    # quick statistical check; the acceptance suite runs the full protocol
    rng = np.random.default_rng(37)
    noise = NoiseConfig()
    kept_true = kept_false = total_true = total_kept = 0
    for _ in range(60):
        scene = make_scene(rng, n=10)
        bears, labels = [], []
        for i in range(10):
            for j in range(10):
                if i == j:
                    continue
                u = perturb_direction(scene.bearing_dir(i, j), noise.bearing_sigma, rng)
                bears.append(BearingMeasurement(i, j, u, 0))
                labels.append(True)
            for _ in range(rng.poisson(4.0)):
                v = rng.standard_normal(3)
                tgt = int(rng.integers(0, 10))
                if tgt == i:
                    continue
                bears.append(BearingMeasurement(i, tgt, v / np.linalg.norm(v), 0))
                labels.append(False)
        frame = MeasurementFrame(0, (), bears, ())
        mask = outliers.reject_outliers(frame, scene.P, noise)
        for idx, lab in enumerate(labels):
            if mask.kept(idx):
                total_kept += 1
                if lab:
                    kept_true += 1
                else:
                    kept_false += 1
            if lab:
                total_true += 1
    precision = kept_true / total_kept
    recall = kept_true / total_true
    assert precision > 0.93
    assert recall > 0.90
