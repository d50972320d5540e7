"""Measurement residuals (distance / bearing / gravity) and their Jacobians.

All residuals are expressed in a single frame: robot states are positions
``p_i`` and rotations ``R_i`` relative to one reference robot, and ``g`` is
the gravity-reaction direction in that same frame. Rotation Jacobians use the
right perturbation ``R <- R @ Exp(delta)``; gravity-direction Jacobians are
returned in ambient R^3 (callers multiply by a sphere tangent basis).

The ``*_batch_terms`` functions evaluate many measurements at once on stacked
state arrays; the scalar wrappers below them are the single-measurement form.
"""

from __future__ import annotations

import numpy as np

from . import core

MIN_BASELINE = 1e-6


class DegenerateGeometry(RuntimeError):
    """Two sensor origins (nearly) coincide; the residual is undefined."""


def skew_batch(v: np.ndarray) -> np.ndarray:
    """(m,3) -> (m,3,3) cross-product matrices."""
    m = v.shape[0]
    S = np.zeros((m, 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


def scatter_row_jacobians(pairs, nslots, m, depth):
    """Sum row-wise Jacobian contributions into dense per-slot stacks.

    ``pairs`` is a sequence of (slot_per_row, contributions) where
    ``slot_per_row`` maps each of the ``m`` measurement rows to a parameter
    slot (the value ``nslots`` acts as a discard bin) and ``contributions``
    is (m, depth, 3) or (m, depth*3). Returns a list of ``nslots`` dense
    (m*depth, 3) Jacobians.
    """
    J = np.zeros((nslots + 1, m, depth, 3))
    rows = np.arange(m)
    for slots, contrib in pairs:
        J[slots, rows] += contrib.reshape(m, depth, 3)
    return list(J[:nslots].reshape(nslots, m * depth, 3))


def stack_extrinsics(extrinsics) -> dict:
    """Per-robot extrinsics -> stacked arrays for the batch evaluators."""
    cam_rot = np.stack([core.quat_to_matrix(e.cam_rotation) for e in extrinsics])
    return {
        "cam_rot": cam_rot,
        "cam_pos": np.stack([e.cam_position for e in extrinsics]),
        "uwb_pos": np.stack([e.uwb_position for e in extrinsics]),
        "marker_pos": np.stack([e.marker_position for e in extrinsics]),
    }


# ---------------------------------------------------------------------------
# batch evaluators


def distance_batch_terms(a, b, z, P, R, ext, jac=True):
    """Ranging residuals ||antenna_b - antenna_a|| - z.

    Args:
        a, b: (m,) int robot indices of the two endpoints.
        z: (m,) measured ranges.
        P: (n,3) positions, R: (n,3,3) rotations, ext: stack_extrinsics dict.

    Returns:
        r: (m,) residuals and, when jac, a dict with (m,3) rows per
        derivative: p_a, p_b, th_a, th_b.
    """
    Ra, Rb = R[a], R[b]
    ua, ub = ext["uwb_pos"][a], ext["uwb_pos"][b]
    d = P[b] + np.einsum("mij,mj->mi", Rb, ub) - P[a] - np.einsum("mij,mj->mi", Ra, ua)
    n = np.linalg.norm(d, axis=1)
    if np.any(n < MIN_BASELINE):
        raise DegenerateGeometry("ranging antennas coincide")
    u = d / n[:, None]
    r = n - z
    if not jac:
        return r, None
    jacs = {
        "p_a": -u,
        "p_b": u,
        "th_a": np.einsum("mi,mij->mj", u, np.einsum("mij,mjk->mik", Ra, skew_batch(ua))),
        "th_b": -np.einsum("mi,mij->mj", u, np.einsum("mij,mjk->mik", Rb, skew_batch(ub))),
    }
    return r, jacs


def bearing_batch_terms(obs, tgt, z, P, R, ext, jac=True):
    """Camera-frame direction residuals (predicted unit vector minus measured).

    Args:
        obs, tgt: (m,) int robot indices (camera side, marker side).
        z: (m,3) measured unit directions in the observer camera frame.

    Returns:
        r: (m,3) and, when jac, dict of (m,3,3) blocks: p_obs, p_tgt,
        th_obs, th_tgt.
    """
    Ro, Rt = R[obs], R[tgt]
    Rc = ext["cam_rot"][obs]
    cam, mark = ext["cam_pos"][obs], ext["marker_pos"][tgt]
    d = P[tgt] + np.einsum("mij,mj->mi", Rt, mark) - P[obs] - np.einsum("mij,mj->mi", Ro, cam)
    n = np.linalg.norm(d, axis=1)
    if np.any(n < MIN_BASELINE):
        raise DegenerateGeometry("camera and marker coincide")
    u = d / n[:, None]
    C = np.einsum("mji,mkj->mik", Rc, Ro)  # (Ro Rc)^T
    r = np.einsum("mij,mj->mi", C, u) - z
    if not jac:
        return r, None
    Pm = (np.eye(3)[None] - np.einsum("mi,mj->mij", u, u)) / n[:, None, None]
    CP = np.einsum("mij,mjk->mik", C, Pm)
    RtSu = np.einsum("mji,mj->mi", Ro, u)  # Ro^T u
    jacs = {
        "p_obs": -CP,
        "p_tgt": CP,
        "th_obs": np.einsum("mji,mjk->mik", Rc, skew_batch(RtSu))
        + np.einsum("mij,mjk,mkl->mil", CP, Ro, skew_batch(cam)),
        "th_tgt": -np.einsum("mij,mjk,mkl->mil", CP, Rt, skew_batch(mark)),
    }
    return r, jacs


def gravity_batch_terms(robots, z, R, g, jac=True):
    """Body-frame gravity-direction residuals R_i^T g - z.

    Returns r: (m,3) and jac dict: th (m,3,3), g (m,3,3) ambient derivative.
    """
    Ri = R[robots]
    body = np.einsum("mji,j->mi", Ri, g)
    r = body - z
    if not jac:
        return r, None
    return r, {"th": skew_batch(body), "g": np.transpose(Ri, (0, 2, 1))}


# ---------------------------------------------------------------------------
# single-measurement wrappers


def distance_residual(p_a, R_a, ext_a, p_b, R_b, ext_b, measured, jac=True):
    P = np.stack([p_a, p_b])
    R = np.stack([R_a, R_b])
    ext = stack_extrinsics([ext_a, ext_b])
    r, jacs = distance_batch_terms(
        np.array([0]), np.array([1]), np.array([measured]), P, R, ext, jac=jac
    )
    if not jac:
        return float(r[0]), None
    return float(r[0]), {k: v[0][None, :] for k, v in jacs.items()}


def bearing_residual(p_obs, R_obs, ext_obs, p_tgt, R_tgt, ext_tgt, measured, jac=True):
    P = np.stack([p_obs, p_tgt])
    R = np.stack([R_obs, R_tgt])
    ext = stack_extrinsics([ext_obs, ext_tgt])
    r, jacs = bearing_batch_terms(
        np.array([0]), np.array([1]), np.asarray(measured)[None, :], P, R, ext, jac=jac
    )
    if not jac:
        return r[0], None
    return r[0], {k: v[0] for k, v in jacs.items()}


def gravity_residual(R_i, g, measured, jac=True):
    r, jacs = gravity_batch_terms(
        np.array([0]), np.asarray(measured)[None, :], np.asarray(R_i)[None], np.asarray(g), jac=jac
    )
    if not jac:
        return r[0], None
    return r[0], {k: v[0] for k, v in jacs.items()}
