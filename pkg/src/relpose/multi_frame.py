"""Sliding-window smoothing of relative poses with inertial constraints.

Two estimation tiers share one window of keyframes. The loose tier treats
each frame's instantaneous solution as a pose measurement of the first-frame
state and propagates the rest of the window from it. The tight tier
optimizes every keyframe state jointly against raw ranges, bearings, and
gravity, couples consecutive keyframes through preintegrated IMU increments
(with an auxiliary state carrying the reference robot's own motion so the
preintegration covariance whitens the residual correctly), and preserves
evicted information through a Schur-complement prior with frozen
linearization points.

All states are robocentric: robot j's pose/velocity at keyframe i lives in
the reference robot's body frame at t_i, so the reference itself is the
identity at every keyframe and gravity never needs a global frame.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import core, preintegration, residuals, solver
from .core import MeasurementFrame, NoiseConfig, RobotState
from .outliers import BearingMask, reject_outliers
from .preintegration import Preintegration
from .single_frame import (
    SfcResult,
    SingleFrameError,
    build_distance_matrix,
    mds_embed,
    run_sfc,
    run_sfo,
)

__all__ = [
    "KEYFRAME_MIN_GAP_NS",
    "KEYFRAME_MAX_GAP_NS",
    "MultiFrameError",
    "InsufficientConstraints",
    "SolverFailure",
    "is_keyframe",
    "AuxiliaryState",
    "Keyframe",
    "MarginalizationPrior",
    "SlidingWindow",
    "FrameEstimate",
    "run_mflo",
    "build_mfto_problem",
    "run_mfto",
    "marginalize",
    "slide",
    "MultiFrameEstimator",
]

KEYFRAME_MIN_GAP_NS = 100_000_000  # with a single-frame result
KEYFRAME_MAX_GAP_NS = 200_000_000  # unconditionally

# fixed variances whitening the loose tier's pose-measurement residuals
MFLO_POSITION_VARIANCE = 0.1
MFLO_ROTATION_VARIANCE = 0.01

DEFAULT_WINDOW = 10


class MultiFrameError(RuntimeError):
    pass


class InsufficientConstraints(MultiFrameError):
    """No single-frame result anywhere in the window to anchor the solve."""


class SolverFailure(MultiFrameError):
    pass


def is_keyframe(now: int, last_kf_time: int, sfre_produced: bool) -> bool:
    """Keyframe cadence rule: >100 ms with a single-frame result, or >200 ms."""
    dt = now - last_kf_time
    return (dt > KEYFRAME_MIN_GAP_NS and sfre_produced) or dt > KEYFRAME_MAX_GAP_NS


@dataclass
class AuxiliaryState:
    """The reference robot's own motion over one keyframe interval, at t_i."""

    position: np.ndarray
    velocity: np.ndarray
    orientation: np.ndarray

    @classmethod
    def from_preintegration(cls, p: Preintegration) -> "AuxiliaryState":
        return cls(p.alpha.copy(), p.beta.copy(), p.gamma.copy())


@dataclass
class Keyframe:
    frame: MeasurementFrame
    states: dict  # robot id -> RobotState, non-reference robots only
    sfre: SfcResult | None = None
    mask: BearingMask | None = None
    preint_to_next: dict | None = None  # robot id -> Preintegration
    whiten_to_next: dict | None = None  # robot id -> 9x9 sqrt information
    aux_to_next: AuxiliaryState | None = None
    gravity: np.ndarray | None = None  # reference-frame gravity at this keyframe

    @property
    def timestamp(self) -> int:
        return self.frame.timestamp


@dataclass
class MarginalizationPrior:
    """Linear prior ``r(x) = r0 + S (x [-] lin)`` over the oldest keyframe.

    ``robots`` fixes the column layout: nine tangent slots per robot in
    listed order (position, velocity, rotation). Jacobians stay frozen at the
    stored linearization points.
    """

    robots: tuple
    lin_positions: dict
    lin_velocities: dict
    lin_orientations: dict
    sqrt_info: np.ndarray
    r0: np.ndarray

    def delta(self, states: dict) -> np.ndarray:
        parts = []
        for j in self.robots:
            s = states[j]
            parts.append(s.position - self.lin_positions[j])
            parts.append(s.velocity - self.lin_velocities[j])
            dq = core.quat_mul(core.quat_conj(self.lin_orientations[j]), s.orientation)
            parts.append(core.quat_log(dq))
        return np.concatenate(parts)

    def terms(self, states: dict, jac: bool = True):
        d = self.delta(states)
        r = self.r0 + self.sqrt_info @ d
        if not jac:
            return r, None
        jacs = []
        for k in range(len(self.robots)):
            jacs.append(self.sqrt_info[:, 9 * k : 9 * k + 3])
            jacs.append(self.sqrt_info[:, 9 * k + 3 : 9 * k + 6])
            th = d[9 * k + 6 : 9 * k + 9]
            jacs.append(self.sqrt_info[:, 9 * k + 6 : 9 * k + 9] @ core.so3_jr_inv(th))
        return r, jacs


@dataclass
class SlidingWindow:
    reference: int
    capacity: int = DEFAULT_WINDOW
    keyframes: list = field(default_factory=list)
    prior: MarginalizationPrior | None = None
    latest: tuple | None = None  # most recent non-key frame and its estimate


@dataclass
class FrameEstimate:
    """Per-frame output: relative poses of every non-reference robot."""

    timestamp: int
    positions: dict
    orientations: dict
    velocities: dict
    gravity: np.ndarray | None = None
    source: str = "mfto"
    insufficient: bool = False
    solver_failed: bool = False


# --- whitening ----------------------------------------------------------------


def _sqrt_information(P: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root with an eigenvalue floor."""
    lam, U = np.linalg.eigh(0.5 * (P + P.T))
    floor = max(lam[-1] * 1e-10, 1e-18)
    lam = np.maximum(lam, floor)
    return (U / np.sqrt(lam)) @ U.T


# --- inertial residual terms ---------------------------------------------------


def _rf_terms(p, v, q, preint: Preintegration, jac=True):
    """Auxiliary state pinned to the reference robot's own preintegration."""
    e = core.quat_log(core.quat_mul(q, core.quat_conj(preint.gamma)))
    r = np.concatenate([p - preint.alpha, v - preint.beta, e])
    if not jac:
        return r, None
    Jp = np.zeros((9, 3))
    Jp[0:3] = np.eye(3)
    Jv = np.zeros((9, 3))
    Jv[3:6] = np.eye(3)
    Jq = np.zeros((9, 3))
    Jq[6:9] = core.so3_jr_inv(e) @ core.quat_to_matrix(preint.gamma)
    return r, [Jp, Jv, Jq]


def _tf_terms(p_i, v_i, q_i, p_n, v_n, q_n, ap, av, aq, preint: Preintegration, jac=True):
    """One robot's preintegration explained by its states at both interval ends
    plus the reference robot's auxiliary motion."""
    dt = preint.dt_total
    Ri_t = core.quat_to_matrix(q_i).T
    A = core.quat_to_matrix(aq)
    Rg = core.quat_to_matrix(preint.gamma)

    u_p = Ri_t @ (A @ p_n - p_i - v_i * dt + ap)
    u_v = Ri_t @ (A @ v_n - v_i + av)
    X = core.quat_mul(
        core.quat_conj(q_i), core.quat_mul(aq, core.quat_mul(q_n, core.quat_conj(preint.gamma)))
    )
    e = core.quat_log(X)
    r = np.concatenate([u_p - preint.alpha, u_v - preint.beta, e])
    if not jac:
        return r, None

    Jr_inv = core.so3_jr_inv(e)
    Z = np.zeros((9, 3))

    J_pi = Z.copy()
    J_pi[0:3] = -Ri_t
    J_vi = Z.copy()
    J_vi[0:3] = -Ri_t * dt
    J_vi[3:6] = -Ri_t
    J_qi = Z.copy()
    J_qi[0:3] = core.skew(u_p)
    J_qi[3:6] = core.skew(u_v)
    J_qi[6:9] = -core.so3_jl_inv(e)

    J_pn = Z.copy()
    J_pn[0:3] = Ri_t @ A
    J_vn = Z.copy()
    J_vn[3:6] = Ri_t @ A
    J_qn = Z.copy()
    J_qn[6:9] = Jr_inv @ Rg

    J_ap = Z.copy()
    J_ap[0:3] = Ri_t
    J_av = Z.copy()
    J_av[3:6] = Ri_t
    J_aq = Z.copy()
    J_aq[0:3] = -Ri_t @ A @ core.skew(p_n)
    J_aq[3:6] = -Ri_t @ A @ core.skew(v_n)
    J_aq[6:9] = Jr_inv @ Rg @ core.quat_to_matrix(q_n).T

    return r, [J_pi, J_vi, J_qi, J_pn, J_vn, J_qn, J_ap, J_av, J_aq]


def _mflo_p_terms(p0, v0, q0, meas_rf, alpha_rf, gamma_rf, alpha_j, dt, jac=True):
    """First-frame state explaining one frame's measured relative position."""
    Rq = core.quat_to_matrix(q0)
    r = core.quat_to_matrix(gamma_rf) @ meas_rf - (p0 + v0 * dt - alpha_rf + Rq @ alpha_j)
    if not jac:
        return r, None
    return r, [-np.eye(3), -dt * np.eye(3), Rq @ core.skew(alpha_j)]


def _mflo_q_terms(q0, meas_q, gamma_rf, gamma_j, jac=True):
    """First-frame rotation explaining one frame's measured relative rotation."""
    X = core.quat_mul(
        core.quat_conj(gamma_j),
        core.quat_mul(core.quat_conj(q0), core.quat_mul(gamma_rf, meas_q)),
    )
    e = core.quat_log(X)
    if not jac:
        return e, None
    J = -core.so3_jl_inv(e) @ core.quat_to_matrix(gamma_j).T
    return e, [J]


# --- window utilities -----------------------------------------------------------


def _identity_preint(timestamp: int = 0) -> Preintegration:
    return Preintegration(
        np.zeros(3), np.zeros(3), core.quat_identity(), np.zeros((9, 9)), 0.0,
        np.zeros(3), np.zeros(3), t_start=timestamp, t_end=timestamp,
    )


def _cumulative_preints(window: SlidingWindow, robots) -> list:
    """Per keyframe index, each robot's preintegration from the first keyframe."""
    t0 = window.keyframes[0].timestamp
    out = [{j: _identity_preint(t0) for j in robots}]
    for kf in window.keyframes[:-1]:
        if kf.preint_to_next is None:
            raise MultiFrameError("window intervals are not tiled with preintegrations")
        prev = out[-1]
        out.append({j: preintegration.compose(prev[j], kf.preint_to_next[j]) for j in robots})
    return out


def _first_gravity_by_robot(frame: MeasurementFrame) -> dict:
    seen = {}
    for gm in frame.gravities:
        if gm.robot not in seen:
            seen[gm.robot] = gm
    return seen


# --- loose tier ------------------------------------------------------------------


def run_mflo(window: SlidingWindow, noise: NoiseConfig) -> solver.SolveReport:
    """Solve the first keyframe's states from single-frame poses + IMU, then
    re-propagate every later keyframe from the result."""
    kfs = window.keyframes
    ref = window.reference
    if not any(kf.sfre is not None for kf in kfs):
        raise InsufficientConstraints("no single-frame result in the window")

    robots = sorted(kfs[0].states)
    all_ids = robots + [ref]
    cum = _cumulative_preints(window, all_ids)

    problem = solver.Problem()
    p0, v0, q0 = {}, {}, {}
    s0 = kfs[0].states
    for j in robots:
        p0[j] = problem.add_block(solver.EUCLIDEAN, s0[j].position, name=f"p{j}")
        v0[j] = problem.add_block(solver.EUCLIDEAN, s0[j].velocity, name=f"v{j}")
        q0[j] = problem.add_block(solver.QUATERNION, s0[j].orientation, name=f"q{j}")

    g_block = None
    grav0 = _first_gravity_by_robot(kfs[0].frame) if noise.gravity_enabled else {}
    if grav0:
        core.note_gravity_read(len(grav0))
        if kfs[0].gravity is not None:
            g_init = kfs[0].gravity
        elif ref in grav0:
            g_init = grav0[ref].direction
        else:
            j0 = sorted(grav0)[0]
            g_init = core.quat_rotate(s0[j0].orientation, grav0[j0].direction)
        g_block = problem.add_block(solver.SPHERE, g_init, name="g")

    w_p = 1.0 / np.sqrt(MFLO_POSITION_VARIANCE)
    w_q = 1.0 / np.sqrt(MFLO_ROTATION_VARIANCE)

    for i, kf in enumerate(kfs):
        if kf.sfre is None:
            continue
        pre_rf = cum[i][ref]
        dt = pre_rf.dt_total
        for j in robots:
            if j in kf.sfre.positions:
                meas = kf.sfre.positions[j]
                a_rf, g_rf, a_j = pre_rf.alpha, pre_rf.gamma, cum[i][j].alpha

                def p_fn(values, jac, meas=meas, a_rf=a_rf, g_rf=g_rf, a_j=a_j, dt=dt):
                    return _mflo_p_terms(values[0], values[1], values[2], meas, a_rf, g_rf, a_j, dt, jac)

                problem.add_residual([p0[j], v0[j], q0[j]], p_fn, sqrt_info=w_p, name=f"p{i},{j}")
            if j in kf.sfre.orientations and kf.sfre.rotation_observable[j]:
                meas_q = kf.sfre.orientations[j]
                g_rf, g_j = pre_rf.gamma, cum[i][j].gamma

                def q_fn(values, jac, meas_q=meas_q, g_rf=g_rf, g_j=g_j):
                    return _mflo_q_terms(values[0], meas_q, g_rf, g_j, jac)

                problem.add_residual([q0[j]], q_fn, sqrt_info=w_q, name=f"q{i},{j}")

    if g_block is not None:
        w_g = 1.0 / noise.gravity_sigma
        for j, gm in sorted(grav0.items()):
            z = gm.direction
            if j == ref:

                def g_fn(values, jac, z=z):
                    g = values[0]
                    if not jac:
                        return g - z, None
                    return g - z, [core.sphere_tangent_basis(g)]

                problem.add_residual([g_block], g_fn, sqrt_info=w_g, name="g_ref")
            else:

                def gj_fn(values, jac, z=z):
                    q, g = values
                    Rt = core.quat_to_matrix(q).T
                    r = Rt @ g - z
                    if not jac:
                        return r, None
                    return r, [core.skew(Rt @ g), Rt @ core.sphere_tangent_basis(g)]

                problem.add_residual([q0[j], g_block], gj_fn, sqrt_info=w_g, name=f"g{j}")

    try:
        report = problem.solve(max_iterations=30)
    except (solver.NonFiniteResidual, solver.SingularNormalEquations) as err:
        raise SolverFailure(str(err)) from err

    for j in robots:
        s0[j] = RobotState(p0[j].value, v0[j].value, q0[j].value)
    if g_block is not None:
        kfs[0].gravity = g_block.value.copy()

    # re-propagate the rest of the window from the solved first frame
    for i in range(1, len(kfs)):
        prev = kfs[i - 1]
        kfs[i].states = {
            j: preintegration.propagate_relative(
                prev.states[j], prev.preint_to_next[ref], prev.preint_to_next[j]
            )
            for j in robots
        }
    return report


# --- tight tier --------------------------------------------------------------------


def build_mfto_problem(window: SlidingWindow, extrinsics, noise: NoiseConfig):
    """Assemble the full-window problem; returns (problem, block handles)."""
    kfs = window.keyframes
    if len(kfs) < 2:
        raise MultiFrameError("tight solve needs at least 2 keyframes")
    ref = window.reference
    n = len(extrinsics)
    robots = sorted(kfs[0].states)
    ext = residuals.stack_extrinsics(extrinsics)

    problem = solver.Problem()
    P, V, Q, G = {}, {}, {}, {}
    aux_p, aux_v, aux_q = {}, {}, {}

    for i, kf in enumerate(kfs):
        for j in robots:
            s = kf.states[j]
            P[i, j] = problem.add_block(solver.EUCLIDEAN, s.position, name=f"p{i},{j}")
            V[i, j] = problem.add_block(solver.EUCLIDEAN, s.velocity, name=f"v{i},{j}")
            Q[i, j] = problem.add_block(solver.QUATERNION, s.orientation, name=f"q{i},{j}")
        # frozen identity for the reference keeps batched closures uniform
        P[i, ref] = problem.add_block(solver.EUCLIDEAN, np.zeros(3), frozen=True)
        Q[i, ref] = problem.add_block(solver.QUATERNION, core.quat_identity(), frozen=True)

    for i in range(len(kfs) - 1):
        aux = kfs[i].aux_to_next
        if aux is None or kfs[i].preint_to_next is None:
            raise MultiFrameError("keyframe interval missing preintegration or auxiliary state")
        aux_p[i] = problem.add_block(solver.EUCLIDEAN, aux.position, name=f"ap{i}")
        aux_v[i] = problem.add_block(solver.EUCLIDEAN, aux.velocity, name=f"av{i}")
        aux_q[i] = problem.add_block(solver.QUATERNION, aux.orientation, name=f"aq{i}")

    if noise.gravity_enabled:
        prev_g = None
        for i, kf in enumerate(kfs):
            grav = _first_gravity_by_robot(kf.frame)
            if not grav:
                continue
            core.note_gravity_read(len(grav))
            if kf.gravity is not None:
                g_init = kf.gravity
            elif ref in grav:
                g_init = grav[ref].direction
            elif prev_g is not None:
                g_init = prev_g
            else:
                j0 = sorted(grav)[0]
                g_init = core.quat_rotate(kf.states[j0].orientation, grav[j0].direction)
            G[i] = problem.add_block(solver.SPHERE, g_init, name=f"g{i}")
            prev_g = G[i].value

    # inertial blocks
    for i in range(len(kfs) - 1):
        kf = kfs[i]
        pre_rf = kf.preint_to_next[ref]
        W_rf = kf.whiten_to_next[ref]

        def rf_fn(values, jac, pre=pre_rf):
            return _rf_terms(values[0], values[1], values[2], pre, jac)

        problem.add_residual(
            [aux_p[i], aux_v[i], aux_q[i]], rf_fn, sqrt_info=W_rf, name=f"rf{i}"
        )

        for j in robots:
            pre_j = kf.preint_to_next[j]
            W_j = kf.whiten_to_next[j]

            def tf_fn(values, jac, pre=pre_j):
                return _tf_terms(*values, pre, jac)

            problem.add_residual(
                [P[i, j], V[i, j], Q[i, j], P[i + 1, j], V[i + 1, j], Q[i + 1, j],
                 aux_p[i], aux_v[i], aux_q[i]],
                tf_fn,
                sqrt_info=W_j,
                name=f"tf{i},{j}",
            )

    # per-keyframe measurement blocks
    for i, kf in enumerate(kfs):
        p_order, q_order = [], []
        p_slot, q_slot = {}, {}
        for j in robots + [ref]:
            p_slot[j] = len(p_order)
            p_order.append(P[i, j])
        for j in robots + [ref]:
            q_slot[j] = len(q_order)
            q_order.append(Q[i, j])
        order = p_order + q_order
        nslots = len(order)

        p_js = np.array(list(p_slot))
        q_js = np.array(list(q_slot))

        def assemble(values, p_js=p_js, q_js=q_js, n_p=len(p_order)):
            Pm = np.zeros((n, 3))
            Pm[p_js] = np.stack(values[:n_p])
            Rm = np.tile(np.eye(3), (n, 1, 1))
            Rm[q_js] = core.quat_to_matrix_batch(np.stack(values[n_p:]))
            return Pm, Rm

        n_p = len(p_order)
        d_rows = [dm for dm in kf.frame.distances if dm.from_robot < n and dm.to_robot < n]
        if d_rows:
            da = np.array([dm.from_robot for dm in d_rows])
            db = np.array([dm.to_robot for dm in d_rows])
            dz = np.array([dm.distance for dm in d_rows])
            d_slots = [
                np.array([base + slots[r] for r in ids])
                for ids in (da, db)
                for slots, base in ((p_slot, 0), (q_slot, n_p))
            ]

            def dist_fn(values, jac, da=da, db=db, dz=dz, assemble=assemble,
                        d_slots=d_slots, nslots=nslots):
                Pm, Rm = assemble(values)
                r, jc = residuals.distance_batch_terms(da, db, dz, Pm, Rm, ext, jac=jac)
                if not jac:
                    return r, None
                jacs = residuals.scatter_row_jacobians(
                    list(zip(d_slots, (jc["p_a"], jc["th_a"], jc["p_b"], jc["th_b"]))),
                    nslots, len(r), 1,
                )
                return r, jacs

            problem.add_residual(
                order, dist_fn, sqrt_info=1.0 / noise.distance_sigma, name=f"d{i}"
            )

        b_rows = [
            (k, bm)
            for k, bm in enumerate(kf.frame.bearings)
            if (kf.mask is None or kf.mask.kept(k)) and bm.observer < n and bm.target < n
        ]
        if b_rows:
            bo = np.array([bm.observer for _, bm in b_rows])
            bt = np.array([bm.target for _, bm in b_rows])
            bz = np.array([bm.direction for _, bm in b_rows])
            b_slots = [
                np.array([base + slots[r] for r in ids])
                for ids in (bo, bt)
                for slots, base in ((p_slot, 0), (q_slot, n_p))
            ]

            def bear_fn(values, jac, bo=bo, bt=bt, bz=bz, assemble=assemble,
                        b_slots=b_slots, nslots=nslots):
                Pm, Rm = assemble(values)
                r, jc = residuals.bearing_batch_terms(bo, bt, bz, Pm, Rm, ext, jac=jac)
                if not jac:
                    return r.ravel(), None
                jacs = residuals.scatter_row_jacobians(
                    list(zip(b_slots, (jc["p_obs"], jc["th_obs"], jc["p_tgt"], jc["th_tgt"]))),
                    nslots, len(r), 3,
                )
                return r.ravel(), jacs

            problem.add_residual(
                order, bear_fn, sqrt_info=1.0 / noise.bearing_sigma, name=f"b{i}"
            )

        if i in G:
            w_g = 1.0 / noise.gravity_sigma
            g_rows = [(j, gm) for j, gm in sorted(_first_gravity_by_robot(kf.frame).items())
                      if j == ref or j in kf.states]
            if g_rows:
                gz = np.array([gm.direction for _, gm in g_rows])
                m_g = len(g_rows)

                def grav_fn(values, jac, gz=gz, m_g=m_g):
                    g = values[-1]
                    Rt = core.quat_to_matrix_batch(np.stack(values[:-1])).transpose(0, 2, 1)
                    rot_g = Rt @ g
                    if not jac:
                        return (rot_g - gz).ravel(), None
                    jacs = []
                    for k in range(m_g):
                        J = np.zeros((m_g, 3, 3))
                        J[k] = core.skew(rot_g[k])
                        jacs.append(J.reshape(3 * m_g, 3))
                    jacs.append((Rt @ core.sphere_tangent_basis(g)).reshape(3 * m_g, 2))
                    return (rot_g - gz).ravel(), jacs

                problem.add_residual([Q[i, j] for j, _ in g_rows] + [G[i]],
                                     grav_fn, sqrt_info=w_g, name=f"g{i}")

    # marginalization prior over the oldest keyframe's states
    if window.prior is not None:
        prior = window.prior
        blocks = []
        for j in prior.robots:
            blocks.extend([P[0, j], V[0, j], Q[0, j]])

        def prior_fn(values, jac, prior=prior, robots=prior.robots):
            states = {
                j: RobotState(values[3 * k], values[3 * k + 1], values[3 * k + 2])
                for k, j in enumerate(robots)
            }
            return prior.terms(states, jac)

        problem.add_residual(blocks, prior_fn, name="prior")

    handles = {"P": P, "V": V, "Q": Q, "G": G, "aux_p": aux_p, "aux_v": aux_v, "aux_q": aux_q}
    return problem, handles


def run_mfto(window: SlidingWindow, extrinsics, noise: NoiseConfig,
             max_iterations: int = 20, cost_tol: float = 1e-8) -> solver.SolveReport:
    """Full-window tight solve; writes states, auxiliaries, and gravities back."""
    problem, h = build_mfto_problem(window, extrinsics, noise)
    try:
        report = problem.solve(max_iterations=max_iterations, cost_tol=cost_tol)
    except (solver.NonFiniteResidual, solver.SingularNormalEquations,
            residuals.DegenerateGeometry) as err:
        raise SolverFailure(str(err)) from err
    if not np.isfinite(report.final_cost):
        raise SolverFailure("non-finite final cost")

    kfs = window.keyframes
    ref = window.reference
    robots = sorted(kfs[0].states)
    for i, kf in enumerate(kfs):
        kf.states = {
            j: RobotState(h["P"][i, j].value, h["V"][i, j].value, h["Q"][i, j].value)
            for j in robots
        }
        if i in h["G"]:
            kf.gravity = h["G"][i].value.copy()
        if i < len(kfs) - 1:
            kf.aux_to_next = AuxiliaryState(
                h["aux_p"][i].value.copy(),
                h["aux_v"][i].value.copy(),
                h["aux_q"][i].value.copy(),
            )
    return report


# --- marginalization -----------------------------------------------------------


def marginalize(window: SlidingWindow, extrinsics, noise: NoiseConfig) -> MarginalizationPrior:
    """Fold everything touching the oldest keyframe into a prior on the next one.

    Linearizes the oldest interval's residuals (plus the existing prior) at
    the current estimate, eliminates the oldest states by Schur complement,
    and re-factors the remaining information into square-root form. The
    returned prior's Jacobians stay frozen afterwards.
    """
    kfs = window.keyframes
    ref = window.reference
    n = len(extrinsics)
    robots = sorted(kfs[0].states)
    ext = residuals.stack_extrinsics(extrinsics)
    kf0, kf1 = kfs[0], kfs[1]

    mini = solver.Problem()
    elim, kept = [], []

    P0, V0, Q0 = {}, {}, {}
    P1, V1, Q1 = {}, {}, {}
    for j in robots:
        s = kf0.states[j]
        P0[j] = mini.add_block(solver.EUCLIDEAN, s.position)
        V0[j] = mini.add_block(solver.EUCLIDEAN, s.velocity)
        Q0[j] = mini.add_block(solver.QUATERNION, s.orientation)
        elim += [P0[j], V0[j], Q0[j]]
    aux = kf0.aux_to_next
    ap = mini.add_block(solver.EUCLIDEAN, aux.position)
    av = mini.add_block(solver.EUCLIDEAN, aux.velocity)
    aq = mini.add_block(solver.QUATERNION, aux.orientation)
    elim += [ap, av, aq]

    g0 = None
    grav0 = _first_gravity_by_robot(kf0.frame) if noise.gravity_enabled else {}
    if grav0:
        core.note_gravity_read(len(grav0))
        g_init = kf0.gravity
        if g_init is None and ref in grav0:
            g_init = grav0[ref].direction
        if g_init is None:
            j0 = sorted(grav0)[0]
            g_init = core.quat_rotate(kf0.states[j0].orientation, grav0[j0].direction)
        g0 = mini.add_block(solver.SPHERE, g_init)
        elim.append(g0)

    for j in robots:
        s = kf1.states[j]
        P1[j] = mini.add_block(solver.EUCLIDEAN, s.position)
        V1[j] = mini.add_block(solver.EUCLIDEAN, s.velocity)
        Q1[j] = mini.add_block(solver.QUATERNION, s.orientation)
        kept += [P1[j], V1[j], Q1[j]]

    p_ref = mini.add_block(solver.EUCLIDEAN, np.zeros(3), frozen=True)
    q_ref = mini.add_block(solver.QUATERNION, core.quat_identity(), frozen=True)

    # interval-0 inertial residuals
    pre_rf = kf0.preint_to_next[ref]

    def rf_fn(values, jac, pre=pre_rf):
        return _rf_terms(values[0], values[1], values[2], pre, jac)

    mini.add_residual([ap, av, aq], rf_fn, sqrt_info=kf0.whiten_to_next[ref])

    for j in robots:
        pre_j = kf0.preint_to_next[j]

        def tf_fn(values, jac, pre=pre_j):
            return _tf_terms(*values, pre, jac)

        mini.add_residual(
            [P0[j], V0[j], Q0[j], P1[j], V1[j], Q1[j], ap, av, aq],
            tf_fn,
            sqrt_info=kf0.whiten_to_next[j],
        )

    # oldest keyframe's measurements
    p_order = [P0.get(j, p_ref) for j in range(n)]
    q_order = [Q0.get(j, q_ref) for j in range(n)]
    order = p_order + q_order

    def assemble(values):
        Pm = np.stack(values[:n])
        Rm = np.stack([core.quat_to_matrix(v) for v in values[n:]])
        return Pm, Rm

    d_rows = [dm for dm in kf0.frame.distances if dm.from_robot < n and dm.to_robot < n]
    if d_rows:
        da = np.array([dm.from_robot for dm in d_rows])
        db = np.array([dm.to_robot for dm in d_rows])
        dz = np.array([dm.distance for dm in d_rows])

        def dist_fn(values, jac, da=da, db=db, dz=dz):
            Pm, Rm = assemble(values)
            r, jc = residuals.distance_batch_terms(da, db, dz, Pm, Rm, ext, jac=jac)
            if not jac:
                return r, None
            m = len(r)
            jacs = [None] * (2 * n)
            for key, ids, base in (("p_a", da, 0), ("p_b", db, 0), ("th_a", da, n), ("th_b", db, n)):
                for robot in np.unique(ids):
                    sel = ids == robot
                    tgt = base + robot
                    if jacs[tgt] is None:
                        jacs[tgt] = np.zeros((m, 3))
                    jacs[tgt][sel] += jc[key][sel]
            return r, jacs

        mini.add_residual(order, dist_fn, sqrt_info=1.0 / noise.distance_sigma)

    b_rows = [
        (k, bm)
        for k, bm in enumerate(kf0.frame.bearings)
        if (kf0.mask is None or kf0.mask.kept(k)) and bm.observer < n and bm.target < n
    ]
    if b_rows:
        bo = np.array([bm.observer for _, bm in b_rows])
        bt = np.array([bm.target for _, bm in b_rows])
        bz = np.array([bm.direction for _, bm in b_rows])

        def bear_fn(values, jac, bo=bo, bt=bt, bz=bz):
            Pm, Rm = assemble(values)
            r, jc = residuals.bearing_batch_terms(bo, bt, bz, Pm, Rm, ext, jac=jac)
            if not jac:
                return r.ravel(), None
            m = len(r)
            jacs = [None] * (2 * n)
            for key, ids, base in (
                ("p_obs", bo, 0), ("p_tgt", bt, 0), ("th_obs", bo, n), ("th_tgt", bt, n),
            ):
                for robot in np.unique(ids):
                    sel = ids == robot
                    tgt = base + robot
                    if jacs[tgt] is None:
                        jacs[tgt] = np.zeros((m, 3, 3))
                    jacs[tgt][sel] += jc[key][sel]
            jacs = [None if J is None else J.reshape(3 * m, 3) for J in jacs]
            return r.ravel(), jacs

        mini.add_residual(order, bear_fn, sqrt_info=1.0 / noise.bearing_sigma)

    if g0 is not None:
        w_g = 1.0 / noise.gravity_sigma
        for j, gm in sorted(grav0.items()):
            z = gm.direction
            if j == ref:

                def gr_fn(values, jac, z=z):
                    g = values[0]
                    if not jac:
                        return g - z, None
                    return g - z, [core.sphere_tangent_basis(g)]

                mini.add_residual([g0], gr_fn, sqrt_info=w_g)
            elif j in Q0:

                def gj_fn(values, jac, z=z):
                    q, g = values
                    Rt = core.quat_to_matrix(q).T
                    r = Rt @ g - z
                    if not jac:
                        return r, None
                    return r, [core.skew(Rt @ g), Rt @ core.sphere_tangent_basis(g)]

                mini.add_residual([Q0[j], g0], gj_fn, sqrt_info=w_g)

    if window.prior is not None:
        prior = window.prior
        blocks = []
        for j in prior.robots:
            blocks.extend([P0[j], V0[j], Q0[j]])

        def prior_fn(values, jac, prior=prior, robots=prior.robots):
            states = {
                j: RobotState(values[3 * k], values[3 * k + 1], values[3 * k + 2])
                for k, j in enumerate(robots)
            }
            return prior.terms(states, jac)

        mini.add_residual(blocks, prior_fn)

    dim = mini._assign_indices()
    H, b, _ = mini._build_normal_equations(dim)

    e_idx = np.concatenate([np.arange(blk.index, blk.index + blk.tangent_dim) for blk in elim])
    k_idx = np.concatenate([np.arange(blk.index, blk.index + blk.tangent_dim) for blk in kept])

    Hee = H[np.ix_(e_idx, e_idx)]
    Hek = H[np.ix_(e_idx, k_idx)]
    Hkk = H[np.ix_(k_idx, k_idx)]
    be, bk = b[e_idx], b[k_idx]

    lam, U = np.linalg.eigh(0.5 * (Hee + Hee.T))
    inv = np.where(lam > max(lam[-1], 0.0) * 1e-10 + 1e-18, 1.0 / np.maximum(lam, 1e-300), 0.0)
    Hee_inv = (U * inv) @ U.T

    H_new = Hkk - Hek.T @ Hee_inv @ Hek
    b_new = bk - Hek.T @ Hee_inv @ be

    lam2, U2 = np.linalg.eigh(0.5 * (H_new + H_new.T))
    keep = lam2 > max(lam2[-1], 0.0) * 1e-10 + 1e-18
    S = (np.sqrt(lam2[keep])[:, None] * U2[:, keep].T)
    r0 = (U2[:, keep].T @ b_new) / np.sqrt(lam2[keep])

    return MarginalizationPrior(
        robots=tuple(robots),
        lin_positions={j: kf1.states[j].position.copy() for j in robots},
        lin_velocities={j: kf1.states[j].velocity.copy() for j in robots},
        lin_orientations={j: kf1.states[j].orientation.copy() for j in robots},
        sqrt_info=S,
        r0=r0,
    )


def slide(window: SlidingWindow, new_item, is_kf: bool,
          extrinsics=None, noise=None, keep_prior: bool = True) -> SlidingWindow:
    """Admit a frame: keyframes append FIFO (marginalizing on overflow),
    non-keyframes replace the latest-frame slot."""
    if not is_kf:
        window.latest = (new_item, None)
        return window
    if len(window.keyframes) >= window.capacity:
        if keep_prior and len(window.keyframes) >= 2 and extrinsics is not None:
            try:
                window.prior = marginalize(window, extrinsics, noise)
            except (solver.NonFiniteResidual, solver.SingularNormalEquations,
                    residuals.DegenerateGeometry):
                window.prior = None  # the old prior binds the evicted keyframe
        else:
            window.prior = None
        window.keyframes.pop(0)
    window.keyframes.append(new_item)
    window.latest = None
    return window


# --- driver -----------------------------------------------------------------------


class MultiFrameEstimator:
    """Streaming estimator: feed frames + IMU, get per-frame relative poses.

    ``tier`` selects how far each keyframe is refined: "mflo" stops at the
    loose solve, "mfto" runs the tight solve on top. Between keyframes the
    latest solved states are advanced by pure IMU propagation, so output
    keeps flowing when measurements drop out.
    """

    def __init__(self, extrinsics, noise: NoiseConfig, reference: int = 0,
                 window: int = DEFAULT_WINDOW, tier: str = "mfto",
                 prob_threshold: float = 0.95):
        if tier not in ("mflo", "mfto"):
            raise ValueError(f"unknown tier {tier!r}")
        self.extrinsics = list(extrinsics)
        self.n = len(self.extrinsics)
        self.noise = noise
        self.reference = reference
        self.tier = tier
        self.prob_threshold = prob_threshold
        self.window = SlidingWindow(reference=reference, capacity=window)
        self._imu = {j: [] for j in range(self.n)}
        self._last_kf_ns = None
        # velocities start at zero and stay unconstrained until the second
        # keyframe's solve; propagated poses before that would just smear the
        # initialization error over the output stream, so hold them back
        self._converged = False
        self._reinit = False
        # propagation preintegrals from the newest keyframe, extended
        # incrementally so inter-keyframe frames don't re-integrate the run
        self._prop = None

    # -- internals --------------------------------------------------------

    def _try_sfre(self, frame, refine=True):
        try:
            sfc_res, mask, _ = run_sfc(
                frame, self.extrinsics, self.noise, self.reference, self.prob_threshold
            )
        except SingleFrameError:
            return None, self._fallback_mask(frame)
        if not refine:
            return sfc_res, mask
        refined = run_sfo(frame, sfc_res, mask, self.extrinsics, self.noise)
        return refined, mask

    def _fallback_mask(self, frame):
        try:
            D = build_distance_matrix(frame, self.n)
            emb = mds_embed(D)
            return reject_outliers(frame, emb.points, self.noise, self.prob_threshold)
        except (SingleFrameError, ValueError):
            return BearingMask(np.ones(len(frame.bearings)))

    def _imu_slice(self, robot, t0, t1):
        return [s for s in self._imu[robot] if t0 <= s.timestamp <= t1]

    def _trim_buffers(self, t):
        for j in range(self.n):
            self._imu[j] = [s for s in self._imu[j] if s.timestamp >= t]

    def _integrate_all(self, t0, t1):
        out = {}
        for j in range(self.n):
            samples = self._imu_slice(j, t0, t1)
            if len(samples) < 2:
                return None
            out[j] = preintegration.integrate(samples, noise=self.noise)
        return out

    def _extend_prop(self, t0, t1):
        cached = self._prop
        if cached is not None and cached[0] == t0 and t0 <= cached[1] < t1:
            tail = self._integrate_all(cached[1], t1)
            if tail is not None:
                try:
                    merged = {j: preintegration.compose(cached[2][j], tail[j])
                              for j in tail}
                    self._prop = (t0, t1, merged)
                    return merged
                except preintegration.IntervalMismatch:
                    pass
        full = self._integrate_all(t0, t1)
        self._prop = None if full is None else (t0, t1, full)
        return full

    def _estimate_from(self, kf, timestamp, source, **flags):
        robots = sorted(kf.states)
        return FrameEstimate(
            timestamp=timestamp,
            positions={j: kf.states[j].position.copy() for j in robots},
            orientations={j: kf.states[j].orientation.copy() for j in robots},
            velocities={j: kf.states[j].velocity.copy() for j in robots},
            gravity=None if kf.gravity is None else kf.gravity.copy(),
            source=source,
            **flags,
        )

    def _propagated_estimate(self, frame):
        kf = self.window.keyframes[-1]
        if frame.timestamp == kf.timestamp:
            return self._estimate_from(kf, frame.timestamp, "propagated")
        preints = self._extend_prop(kf.timestamp, frame.timestamp)
        if preints is None:
            return self._estimate_from(kf, frame.timestamp, "propagated")
        ref_pre = preints[self.reference]
        positions, orientations, velocities = {}, {}, {}
        for j in sorted(kf.states):
            s = preintegration.propagate_relative(kf.states[j], ref_pre, preints[j])
            positions[j] = s.position
            orientations[j] = s.orientation
            velocities[j] = s.velocity
        gravity = None
        if kf.gravity is not None:
            gravity = core.quat_to_matrix(ref_pre.gamma).T @ kf.gravity
        return FrameEstimate(frame.timestamp, positions, orientations, velocities,
                             gravity=gravity, source="propagated")

    def _initial_keyframe(self, frame, sfre, mask):
        states = {}
        for j in range(self.n):
            if j == self.reference:
                continue
            if j not in sfre.positions:
                return None
            q = sfre.orientations.get(j, core.quat_identity())
            states[j] = RobotState(sfre.positions[j], np.zeros(3), q)
        return Keyframe(frame, states, sfre, mask, gravity=sfre.gravity_rf)

    # -- public API --------------------------------------------------------

    def process_frame(self, frame: MeasurementFrame, imu_samples=(),
                      sfre=None, mask=None) -> FrameEstimate | None:
        """Feed one measurement frame (plus the IMU batch since the previous
        call). ``sfre``/``mask`` let a caller that already ran the
        single-frame stage for this frame (same reference) share the result
        instead of recomputing it."""
        for s in imu_samples:
            if 0 <= s.robot < self.n:
                buf = self._imu[s.robot]
                # streams must stay strictly monotone; drop batch-boundary
                # duplicates and stale samples instead of poisoning the buffer
                if buf and s.timestamp <= buf[-1].timestamp:
                    continue
                buf.append(s)

        if sfre is None and mask is None:
            # the refined single-frame pass only feeds the loose solve, so
            # skip its cost once the tight tier carries its own warm start
            refine = self.tier != "mfto" or not self._converged or self._reinit
            sfre, mask = self._try_sfre(frame, refine=refine)

        if not self.window.keyframes:
            if sfre is None:
                return None
            kf = self._initial_keyframe(frame, sfre, mask)
            if kf is None:
                return None
            self.window.keyframes.append(kf)
            self._last_kf_ns = frame.timestamp
            self._trim_buffers(frame.timestamp)
            self._prop = None
            return self._estimate_from(kf, frame.timestamp, "initial")

        if not is_keyframe(frame.timestamp, self._last_kf_ns, sfre is not None):
            est = self._propagated_estimate(frame)
            self.window.latest = (frame, est)
            return est if self._converged else None

        prev = self.window.keyframes[-1]
        preints = self._integrate_all(prev.timestamp, frame.timestamp)
        if preints is None:
            # cannot tile the interval; emit what propagation gives us
            est = self._propagated_estimate(frame)
            return est if self._converged else None
        prev.preint_to_next = preints
        prev.whiten_to_next = {j: _sqrt_information(p.covariance) for j, p in preints.items()}
        prev.aux_to_next = AuxiliaryState.from_preintegration(preints[self.reference])

        ref_pre = preints[self.reference]
        new_states = {
            j: preintegration.propagate_relative(prev.states[j], ref_pre, preints[j])
            for j in sorted(prev.states)
        }
        gravity = None
        if self.noise.gravity_enabled and prev.gravity is not None:
            gravity = core.quat_to_matrix(ref_pre.gamma).T @ prev.gravity
        kf = Keyframe(frame, new_states, sfre, mask, gravity=gravity)

        slide(self.window, kf, True, self.extrinsics, self.noise,
              keep_prior=(self.tier == "mfto"))
        self._last_kf_ns = frame.timestamp
        self._trim_buffers(frame.timestamp)
        self._prop = None

        flags = {}
        # once the tight tier is converged the propagated window is a better
        # starting point than a fresh loose solve, so only bootstrap/re-seed
        # with the loose pass when needed
        bootstrap = self.tier != "mfto" or not self._converged or self._reinit
        if bootstrap:
            try:
                run_mflo(self.window, self.noise)
            except InsufficientConstraints:
                flags["insufficient"] = True
            except SolverFailure:
                flags["solver_failed"] = True

        if self.tier == "mfto" and len(self.window.keyframes) >= 2:
            try:
                run_mfto(self.window, self.extrinsics, self.noise, cost_tol=1e-6)
                self._reinit = False
            except SolverFailure:
                flags["solver_failed"] = True
                self._reinit = True

        if not flags and len(self.window.keyframes) >= 2:
            self._converged = True
        if not self._converged:
            return None
        return self._estimate_from(
            self.window.keyframes[-1], frame.timestamp, self.tier, **flags
        )
