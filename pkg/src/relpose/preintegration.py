"""Inertial preintegration and robocentric relative-motion propagation.

Accumulates accelerometer/gyro samples between two times into a frame-free
summary (position delta ``alpha``, velocity delta ``beta``, rotation delta
``gamma``) plus a first-order error covariance, then propagates the state of
one robot expressed in another robot's body frame across that interval. The
propagation subtracts the two robots' summaries, so any acceleration common
to both bodies -- gravity in particular -- cancels and never needs to be
estimated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .core import ImuSample, NoiseConfig, RobotState

__all__ = [
    "Preintegration",
    "PreintegrationError",
    "NonMonotoneTimestamps",
    "IntervalMismatch",
    "integrate",
    "compose",
    "propagate_relative",
    "needs_reintegration",
]

#: reference-bias drift (m/s^2, rad/s) beyond which a cached Preintegration is
#: stale and must be rebuilt from its samples.
ACCEL_BIAS_TOL = 1e-3
GYRO_BIAS_TOL = 1e-4

#: allowed disagreement between two robots' interval lengths (seconds).
INTERVAL_TOL = 1e-3


class PreintegrationError(RuntimeError):
    pass


class NonMonotoneTimestamps(PreintegrationError):
    pass


class IntervalMismatch(PreintegrationError):
    pass


@dataclass(frozen=True)
class Preintegration:
    """Bias-corrected motion increments over one interval.

    ``alpha``/``beta``/``gamma`` are the double-integrated position, the
    integrated velocity, and the integrated rotation of the body between the
    first and last sample, expressed in the body frame at the start of the
    interval. ``covariance`` is 9x9 over (d_alpha, d_beta, d_theta) with the
    rotation error as a right perturbation of ``gamma``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    covariance: np.ndarray
    dt_total: float
    accel_bias_ref: np.ndarray
    gyro_bias_ref: np.ndarray
    t_start: int = 0
    t_end: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float).reshape(3))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(3))
        object.__setattr__(self, "gamma", core.quat_canonical(self.gamma))
        cov = np.asarray(self.covariance, dtype=float).reshape(9, 9)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))
        object.__setattr__(
            self, "accel_bias_ref", np.asarray(self.accel_bias_ref, dtype=float).reshape(3)
        )
        object.__setattr__(
            self, "gyro_bias_ref", np.asarray(self.gyro_bias_ref, dtype=float).reshape(3)
        )


def _check_monotone(samples):
    ts = np.array([s.timestamp for s in samples], dtype=np.int64)
    if ts.size < 2:
        raise ValueError("need at least 2 samples to integrate")
    if np.any(np.diff(ts) <= 0):
        raise NonMonotoneTimestamps("sample timestamps must strictly increase")
    return ts


def integrate(samples, biases=None, noise: NoiseConfig | None = None) -> Preintegration:
    """Midpoint-rule preintegration of an ordered sample run.

    ``biases`` is an (accel_bias, gyro_bias) pair held fixed over the whole
    interval; ``noise`` supplies the per-sample standard deviations driving
    the covariance propagation.
    """
    ts = _check_monotone(samples)
    if noise is None:
        noise = NoiseConfig()
    if biases is None:
        b_a = np.zeros(3)
        b_w = np.zeros(3)
    else:
        b_a = np.asarray(biases[0], dtype=float).reshape(3)
        b_w = np.asarray(biases[1], dtype=float).reshape(3)

    acc = np.array([s.specific_force for s in samples]) - b_a
    gyr = np.array([s.angular_velocity for s in samples]) - b_w
    dts = np.diff(ts) * 1e-9

    alpha = np.zeros(3)
    beta = np.zeros(3)
    gamma = core.quat_identity()
    P = np.zeros((9, 9))
    sa2 = noise.accel_noise**2
    sw2 = noise.gyro_noise**2
    I3 = np.eye(3)
    F = np.eye(9)
    Q = np.zeros((9, 9))
    R_k = np.eye(3)

    for k, dt in enumerate(dts):
        w_mid = 0.5 * (gyr[k] + gyr[k + 1])
        q_half = core.quat_exp(0.5 * w_mid * dt)
        q_full = core.quat_exp(w_mid * dt)
        gamma_next = core.quat_mul(gamma, q_full)

        R_next = core.quat_to_matrix(gamma_next)
        a_mid = 0.5 * (R_k @ acc[k] + R_next @ acc[k + 1])

        alpha = alpha + beta * dt + 0.5 * a_mid * dt * dt
        beta = beta + a_mid * dt

        # first-order error-state transition about the midpoint
        R_mid = core.quat_to_matrix(core.quat_mul(gamma, q_half))
        a_body_mid = 0.5 * (acc[k] + acc[k + 1])
        A = -R_mid @ core.skew(a_body_mid)
        F[0:3, 3:6] = I3 * dt
        F[0:3, 6:9] = 0.5 * A * dt * dt
        F[3:6, 6:9] = A * dt
        F[6:9, 6:9] = core.so3_exp(-w_mid * dt)

        # injected noise B diag(sa2, sw2) B^T written out; the midpoint
        # rotation cancels against the isotropic accelerometer covariance
        qa = sa2 * dt * dt
        Q[0:3, 0:3] = (0.25 * qa * dt * dt) * I3
        Q[0:3, 3:6] = Q[3:6, 0:3] = (0.5 * qa * dt) * I3
        Q[3:6, 3:6] = qa * I3
        Q[6:9, 6:9] = (sw2 * dt * dt) * I3

        P = F @ P @ F.T + Q
        P = 0.5 * (P + P.T)
        gamma = gamma_next
        R_k = R_next

    return Preintegration(
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        covariance=P,
        dt_total=float((ts[-1] - ts[0]) * 1e-9),
        accel_bias_ref=b_a,
        gyro_bias_ref=b_w,
        t_start=int(ts[0]),
        t_end=int(ts[-1]),
    )


def compose(a: Preintegration, b: Preintegration) -> Preintegration:
    """Chain two back-to-back intervals into one summary over their union.

    Matches integrating straight through: the second interval's increments are
    re-expressed in the first interval's start frame and accumulated, and the
    covariance is pushed through the same first-order maps.
    """
    if not (a.t_end == 0 and b.t_start == 0) and a.t_end != b.t_start:
        raise IntervalMismatch(f"intervals not adjacent: {a.t_end} != {b.t_start}")
    Ra = core.quat_to_matrix(a.gamma)
    Rb = core.quat_to_matrix(b.gamma)
    dt2 = b.dt_total

    alpha = a.alpha + a.beta * dt2 + Ra @ b.alpha
    beta = a.beta + Ra @ b.beta
    gamma = core.quat_mul(a.gamma, b.gamma)

    F = np.eye(9)
    F[0:3, 3:6] = np.eye(3) * dt2
    F[0:3, 6:9] = -Ra @ core.skew(b.alpha)
    F[3:6, 6:9] = -Ra @ core.skew(b.beta)
    F[6:9, 6:9] = Rb.T
    G = np.zeros((9, 9))
    G[0:3, 0:3] = Ra
    G[3:6, 3:6] = Ra
    G[6:9, 6:9] = np.eye(3)
    P = F @ a.covariance @ F.T + G @ b.covariance @ G.T

    return Preintegration(
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        covariance=P,
        dt_total=a.dt_total + b.dt_total,
        accel_bias_ref=a.accel_bias_ref,
        gyro_bias_ref=a.gyro_bias_ref,
        t_start=a.t_start,
        t_end=b.t_end,
    )


def needs_reintegration(preint: Preintegration, accel_bias, gyro_bias) -> bool:
    """Whether the stored bias references have drifted past the rebuild gates."""
    da = np.linalg.norm(np.asarray(accel_bias, dtype=float) - preint.accel_bias_ref)
    dw = np.linalg.norm(np.asarray(gyro_bias, dtype=float) - preint.gyro_bias_ref)
    return bool(da > ACCEL_BIAS_TOL or dw > GYRO_BIAS_TOL)


def propagate_relative(
    state_j: RobotState, preint_i: Preintegration, preint_j: Preintegration
) -> RobotState:
    """Advance robot j's state, expressed in robot i's frame, across one interval.

    ``state_j`` holds j's pose/velocity in i's body frame at the interval
    start; the result is the same quantities in i's body frame at the interval
    end. The velocity is the frame-projected relative velocity, which carries
    no term from the reference frame's own rotation.
    """
    if abs(preint_i.dt_total - preint_j.dt_total) > INTERVAL_TOL:
        raise IntervalMismatch(
            f"intervals differ: {preint_i.dt_total:.6f}s vs {preint_j.dt_total:.6f}s"
        )
    dt = preint_i.dt_total
    R0 = core.quat_to_matrix(state_j.orientation)
    Ri_inv = core.quat_to_matrix(preint_i.gamma).T

    p1 = Ri_inv @ (state_j.position + state_j.velocity * dt + R0 @ preint_j.alpha - preint_i.alpha)
    v1 = Ri_inv @ (state_j.velocity + R0 @ preint_j.beta - preint_i.beta)
    q1 = core.quat_mul(
        core.quat_conj(preint_i.gamma), core.quat_mul(state_j.orientation, preint_j.gamma)
    )
    return RobotState(p1, v1, q1, state_j.accel_bias.copy(), state_j.gyro_bias.copy())
