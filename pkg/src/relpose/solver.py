"""Dense Levenberg-Marquardt over products of small manifolds.

Parameter blocks live on R^n, the unit quaternions (3-dim tangent, retraction
``q * exp(delta)``), or the unit sphere in R^3 (2-dim tangent, retraction by
rotation within the tangent plane so the norm never drifts). Residual blocks
bind any number of parameter blocks and return a residual vector plus one
Jacobian per bound block, expressed w.r.t. that block's tangent coordinates;
for sphere blocks that means "ambient Jacobian times
``core.sphere_tangent_basis(value)``".

The normal equations are assembled block-wise (no global Jacobian is ever
formed) and solved by dense Cholesky.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import core

EUCLIDEAN = "euclidean"
QUATERNION = "quaternion"
SPHERE = "unit_sphere_3"


class NonFiniteResidual(RuntimeError):
    """A residual block produced NaN/inf values."""


class SingularNormalEquations(RuntimeError):
    """Normal equations stayed unsolvable even at maximum damping."""


class Block:
    """One optimization variable."""

    __slots__ = ("kind", "value", "frozen", "name", "index")

    def __init__(self, kind, value, frozen=False, name=""):
        if kind not in (EUCLIDEAN, QUATERNION, SPHERE):
            raise ValueError(f"unknown block kind {kind!r}")
        self.kind = kind
        self.frozen = bool(frozen)
        self.name = name
        self.index = -1  # tangent offset, assigned by the problem
        value = np.array(value, dtype=float).ravel()
        if kind == QUATERNION:
            value = core.quat_canonical(value)
        elif kind == SPHERE:
            if value.shape != (3,):
                raise ValueError("sphere blocks are unit 3-vectors")
            value = value / np.linalg.norm(value)
        self.value = value

    @property
    def tangent_dim(self) -> int:
        if self.kind == QUATERNION:
            return 3
        if self.kind == SPHERE:
            return 2
        return self.value.size

    def retract(self, delta) -> np.ndarray:
        delta = np.asarray(delta, dtype=float)
        if self.kind == EUCLIDEAN:
            return self.value + delta
        if self.kind == QUATERNION:
            return core.quat_mul(self.value, core.quat_exp(delta))
        # sphere: rotate within the tangent plane, then renormalize
        step = core.sphere_tangent_basis(self.value) @ delta
        a = np.linalg.norm(step)
        if a < 1e-14:
            v = self.value + step
        else:
            v = math.cos(a) * self.value + math.sin(a) / a * step
        return v / np.linalg.norm(v)


class ResidualBlock:
    """A cost term ``rho(|| S * f(blocks) ||^2)``.

    ``fn(values, jac)`` returns ``(r, jacs)`` where ``jacs`` is a list with one
    ``len(r) x tangent_dim`` array (or None, meaning zero) per bound block;
    ``jacs`` itself may be None when ``jac`` is False. ``sqrt_info`` is a
    scalar or matrix square-root information whitener. ``loss`` is None or
    ``("huber", delta)`` applied in whitened units; with ``loss_chunk=k`` the
    loss is applied independently to each consecutive length-k slice of the
    residual (one slice per measurement in a batched block).
    """

    __slots__ = ("blocks", "fn", "sqrt_info", "loss", "loss_chunk", "name")

    def __init__(self, blocks, fn, sqrt_info=None, loss=None, loss_chunk=None, name=""):
        if loss_chunk is not None and (loss_chunk < 1 or loss is None):
            raise ValueError("loss_chunk needs a positive size and a loss")
        self.blocks = list(blocks)
        self.fn = fn
        self.sqrt_info = sqrt_info
        self.loss = loss
        self.loss_chunk = loss_chunk
        self.name = name

    def evaluate(self, values=None, jac=True):
        if values is None:
            values = [b.value for b in self.blocks]
        r, jacs = self.fn(values, jac)
        r = np.asarray(r, dtype=float).ravel()
        if not np.all(np.isfinite(r)):
            raise NonFiniteResidual(f"residual block {self.name or self.fn!r} is not finite")
        if self.sqrt_info is not None:
            S = self.sqrt_info
            if np.isscalar(S):
                r = S * r
                if jac:
                    jacs = [None if J is None else S * J for J in jacs]
            else:
                r = S @ r
                if jac:
                    jacs = [None if J is None else S @ J for J in jacs]
        return r, jacs


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str
    gradient_norm: float = math.nan
    cost_history: list = field(default_factory=list)


def _huber_rho_and_weight(sq_norm, delta):
    """Huber cost of a whitened squared norm, and the IRLS rescale factor."""
    s = math.sqrt(sq_norm)
    if s <= delta:
        return sq_norm, 1.0
    return 2.0 * delta * s - delta * delta, math.sqrt(delta / s)


def _chunked_huber(r, delta, k):
    """Huber applied to each consecutive length-k slice of ``r``.

    Returns the summed cost and a per-element rescale vector.
    """
    if r.size % k:
        raise ValueError(f"residual length {r.size} not divisible by loss chunk {k}")
    chunks = r.reshape(-1, k)
    sq = np.einsum("ij,ij->i", chunks, chunks)
    s = np.sqrt(sq)
    big = s > delta
    rho = np.where(big, 2.0 * delta * s - delta * delta, sq)
    w = np.ones(s.size)
    if np.any(big):
        w[big] = np.sqrt(delta / s[big])
    return float(rho.sum()), np.repeat(w, k)


class Problem:
    """A least-squares problem over manifold parameter blocks."""

    def __init__(self):
        self.blocks: list[Block] = []
        self.residuals: list[ResidualBlock] = []

    def add_block(self, kind, value, frozen=False, name="") -> Block:
        b = Block(kind, value, frozen=frozen, name=name)
        self.blocks.append(b)
        return b

    def add_residual(
        self, blocks, fn, sqrt_info=None, loss=None, loss_chunk=None, name=""
    ) -> ResidualBlock:
        rb = ResidualBlock(
            blocks, fn, sqrt_info=sqrt_info, loss=loss, loss_chunk=loss_chunk, name=name
        )
        self.residuals.append(rb)
        return rb

    # -- assembly ---------------------------------------------------------

    def _assign_indices(self) -> int:
        offset = 0
        for b in self.blocks:
            if b.frozen:
                b.index = -1
            else:
                b.index = offset
                offset += b.tangent_dim
        return offset

    def _cost_only(self) -> float:
        total = 0.0
        for rb in self.residuals:
            r, _ = rb.evaluate(jac=False)
            if rb.loss is None:
                total += float(r @ r)
            elif rb.loss_chunk:
                rho, _ = _chunked_huber(r, rb.loss[1], rb.loss_chunk)
                total += rho
            else:
                rho, _ = _huber_rho_and_weight(float(r @ r), rb.loss[1])
                total += rho
        return 0.5 * total

    def _build_normal_equations(self, dim):
        H = np.zeros((dim, dim))
        g = np.zeros(dim)
        total = 0.0
        for rb in self.residuals:
            r, jacs = rb.evaluate(jac=True)
            if rb.loss is None:
                total += float(r @ r)
            elif rb.loss_chunk:
                rho, wrow = _chunked_huber(r, rb.loss[1], rb.loss_chunk)
                total += rho
                if np.any(wrow != 1.0):
                    r = wrow * r
                    jacs = [None if J is None else wrow[:, None] * J for J in jacs]
            else:
                rho, w = _huber_rho_and_weight(float(r @ r), rb.loss[1])
                total += rho
                if w != 1.0:
                    r = w * r
                    jacs = [None if J is None else w * J for J in jacs]
            active = [
                (b.index, b.tangent_dim, J)
                for b, J in zip(rb.blocks, jacs)
                if not b.frozen and J is not None
            ]
            if not active:
                continue
            if len(active) == 1:
                ia, da, Ja = active[0]
                g[ia : ia + da] += Ja.T @ r
                H[ia : ia + da, ia : ia + da] += Ja.T @ Ja
                continue
            # one local Gram product, scattered with a single fancy-indexed add
            Jloc = np.concatenate([J for _, _, J in active], axis=1)
            Gloc = Jloc.T @ Jloc
            gloc = Jloc.T @ r
            gidx = np.concatenate([np.arange(ia, ia + da) for ia, da, _ in active])
            if len({ia for ia, _, _ in active}) != len(active):
                # a block bound twice: buffered fancy writes would drop terms
                np.add.at(g, gidx, gloc)
                np.add.at(H, np.ix_(gidx, gidx), Gloc)
            else:
                g[gidx] += gloc
                H[np.ix_(gidx, gidx)] += Gloc
        return H, g, 0.5 * total

    # -- solve ------------------------------------------------------------

    def solve(
        self,
        max_iterations: int = 50,
        lam: float = 1e-4,
        cost_tol: float = 1e-8,
        grad_tol: float = 1e-10,
        lam_max: float = 1e12,
    ) -> SolveReport:
        dim = self._assign_indices()
        if dim == 0:
            c = self._cost_only()
            return SolveReport(True, 0, c, c, "no free parameters")

        cost = self._cost_only()
        report = SolveReport(False, 0, cost, cost, "max iterations", cost_history=[cost])

        for it in range(1, max_iterations + 1):
            report.iterations = it
            H, g, cost = self._build_normal_equations(dim)
            grad_inf = float(np.max(np.abs(g))) if dim else 0.0
            report.gradient_norm = grad_inf
            if grad_inf < grad_tol:
                report.converged = True
                report.termination = "gradient"
                break

            D = np.maximum(np.diag(H), 1e-12)
            accepted = False
            while lam <= lam_max:
                try:
                    Hd = H + lam * np.diag(D)
                    cf = scipy.linalg.cho_factor(
                        Hd, lower=True, overwrite_a=True, check_finite=False
                    )
                    delta = scipy.linalg.cho_solve(cf, -g, check_finite=False)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                except scipy.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                saved = [b.value for b in self.blocks]
                for b in self.blocks:
                    if not b.frozen:
                        b.value = b.retract(delta[b.index : b.index + b.tangent_dim])
                try:
                    new_cost = self._cost_only()
                except NonFiniteResidual:
                    new_cost = math.inf
                if new_cost <= cost:
                    accepted = True
                    lam = max(lam / 10.0, 1e-12)
                    break
                for b, v in zip(self.blocks, saved):
                    b.value = v
                lam *= 10.0

            if not accepted:
                report.termination = "trust region collapse"
                report.final_cost = cost
                report.cost_history.append(cost)
                if not np.isfinite(cost):
                    raise SingularNormalEquations("no acceptable step found")
                break

            rel = (cost - new_cost) / max(cost, 1e-300)
            cost = new_cost
            report.cost_history.append(cost)
            if rel < cost_tol:
                report.converged = True
                report.termination = "cost"
                break

        report.final_cost = cost
        return report

    # -- verification -----------------------------------------------------

    def check_jacobian(self, residual: ResidualBlock, eps: float = 1e-6) -> float:
        """Max relative error between analytic and central finite differences.

        The comparison is on the raw (unwhitened) residual, per tangent axis,
        relative to ``max(1, |column|)``.
        """
        values = [b.value for b in residual.blocks]
        r0, jacs = residual.fn(values, True)
        r0 = np.asarray(r0, dtype=float).ravel()
        worst = 0.0
        for k, b in enumerate(residual.blocks):
            J = jacs[k]
            if J is None:
                J = np.zeros((r0.size, b.tangent_dim))
            J = np.asarray(J, dtype=float)
            saved = b.value
            for axis in range(b.tangent_dim):
                d = np.zeros(b.tangent_dim)
                d[axis] = eps
                b.value = saved
                vp = b.retract(d)
                b.value = saved
                vm = b.retract(-d)
                vals_p = list(values)
                vals_p[k] = vp
                vals_m = list(values)
                vals_m[k] = vm
                rp = np.asarray(residual.fn(vals_p, False)[0], dtype=float).ravel()
                rm = np.asarray(residual.fn(vals_m, False)[0], dtype=float).ravel()
                fd = (rp - rm) / (2 * eps)
                col = J[:, axis]
                err = np.max(np.abs(fd - col)) / max(1.0, float(np.max(np.abs(col))))
                worst = max(worst, float(err))
            b.value = saved
        return worst
