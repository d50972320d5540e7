"""Shared test fixtures: hand-rolled static scenes with exact measurements.

The synthesis here is deliberately independent of relpose.sim: measurements
are produced directly from the world geometry, so estimator tests check the
estimators against first principles rather than against the simulator.
"""

import numpy as np

from relpose import core
from relpose.core import (
    BearingMeasurement,
    DistanceMeasurement,
    Extrinsics,
    GravityMeasurement,
    MeasurementFrame,
)

UP = np.array([0.0, 0.0, 1.0])  # world gravity-reaction direction


class Scene:
    def __init__(self, Pw, Rw, extrinsics, ref=0):
        self.n = len(Pw)
        self.ref = ref
        self.Pw = np.asarray(Pw, dtype=float)
        self.Rw = np.asarray(Rw, dtype=float)
        self.ext = list(extrinsics)
        R0 = self.Rw[ref]
        self.P = (self.Pw - self.Pw[ref]) @ R0  # rows: R0^T (p_i - p_ref)
        self.R = np.einsum("ji,mjk->mik", R0, self.Rw)
        self.g = R0.T @ UP

    # -- exact measurement synthesis (world-frame first principles) -------

    def bearing_dir(self, i, j):
        d = (
            self.Pw[j]
            + self.Rw[j] @ self.ext[j].marker_position
            - self.Pw[i]
            - self.Rw[i] @ self.ext[i].cam_position
        )
        u = d / np.linalg.norm(d)
        Rc = core.quat_to_matrix(self.ext[i].cam_rotation)
        return (self.Rw[i] @ Rc).T @ u

    def distance_value(self, i, j):
        d = (
            self.Pw[j]
            + self.Rw[j] @ self.ext[j].uwb_position
            - self.Pw[i]
            - self.Rw[i] @ self.ext[i].uwb_position
        )
        return float(np.linalg.norm(d))

    def gravity_dir(self, i):
        return self.Rw[i].T @ UP

    def frame(self, timestamp=0, noise=None, rng=None, gravity=True):
        """A complete MeasurementFrame; optionally with noise applied."""
        dists, bears, gravs = [], [], []
        for i in range(self.n):
            for j in range(i + 1, self.n):
                z = self.distance_value(i, j)
                if noise is not None:
                    z = max(1e-6, z + rng.normal(0.0, noise.distance_sigma))
                dists.append(DistanceMeasurement(i, j, z, timestamp))
        for i in range(self.n):
            for j in range(self.n):
                if i == j:
                    continue
                u = self.bearing_dir(i, j)
                if noise is not None:
                    u = perturb_direction(u, noise.bearing_sigma, rng)
                bears.append(BearingMeasurement(i, j, u, timestamp))
        if gravity:
            for i in range(self.n):
                u = self.gravity_dir(i)
                if noise is not None:
                    u = perturb_direction(u, noise.gravity_sigma, rng)
                gravs.append(GravityMeasurement(i, u, timestamp))
        return MeasurementFrame(timestamp, dists, bears, gravs)


def perturb_direction(u, sigma, rng):
    """Rotate u about a uniform perpendicular axis by an N(0, sigma^2) angle."""
    axis = core.sphere_tangent_basis(u) @ _unit2(rng)
    return core.so3_exp(rng.normal(0.0, sigma) * axis) @ u


def _unit2(rng):
    a = rng.uniform(0.0, 2.0 * np.pi)
    return np.array([np.cos(a), np.sin(a)])


def random_rotations(rng, n):
    out = []
    for _ in range(n):
        q = core.quat_canonical(rng.standard_normal(4))
        out.append(core.quat_to_matrix(q))
    return np.stack(out)


def make_scene(rng, n=5, ref=0, extrinsics="zero", spread=4.0, min_sep=1.0):
    """Random well-separated scene. extrinsics: "zero" | "rotation" | "random"."""
    while True:
        Pw = rng.uniform(-spread, spread, (n, 3))
        dd = np.linalg.norm(Pw[:, None] - Pw[None, :], axis=2)
        if np.min(dd[~np.eye(n, dtype=bool)]) > min_sep:
            break
    Rw = random_rotations(rng, n)
    if extrinsics == "zero":
        ext = [Extrinsics.identity() for _ in range(n)]
    elif extrinsics == "rotation":
        ext = [
            Extrinsics(cam_rotation=core.quat_canonical(rng.standard_normal(4)))
            for _ in range(n)
        ]
    else:
        ext = [
            Extrinsics(
                cam_rotation=core.quat_canonical(rng.standard_normal(4)),
                cam_position=rng.uniform(-0.03, 0.03, 3),
                uwb_position=rng.uniform(-0.03, 0.03, 3),
                marker_position=rng.uniform(-0.03, 0.03, 3),
            )
            for _ in range(n)
        ]
    return Scene(Pw, Rw, ext, ref=ref)
