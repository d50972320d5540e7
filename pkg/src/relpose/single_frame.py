"""Instantaneous relative poses from one measurement frame.

Two stages. The closed-form stage recovers positions from the pairwise
ranges (classical MDS), estimates the shared gravity direction in the
embedding frame from bearing/gravity angle agreement, resolves the
embedding's reflection ambiguity, and assembles per-robot rotations either
from gravity + yaw or from a direction-alignment problem. The refinement
stage re-optimizes everything (with full lever-arm extrinsics) as a robust
nonlinear least-squares problem seeded by the closed form.

Only rotational extrinsics enter the closed-form stage; translational
offsets are small against inter-robot distances and are left to the
refinement stage.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import core, outliers, residuals, solver

EZ = np.array([0.0, 0.0, 1.0])
MIN_BASELINE = 1e-6


class SingleFrameError(RuntimeError):
    """Base class for per-frame failures; callers skip the frame."""


class IncompleteDistanceMatrix(SingleFrameError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"distance matrix incomplete, missing pairs {self.missing}")


class GravityUnderconstrained(SingleFrameError):
    pass


class DegenerateDirections(SingleFrameError):
    pass


class YawDegenerate(SingleFrameError):
    pass


class ReferenceUnobservable(SingleFrameError):
    pass


@dataclass
class Embedding:
    """Positions in an arbitrary frame, centroid at the origin.

    ``eigenvalues`` are the (clamped) spectral weights of the three
    embedding axes, descending.
    """

    points: np.ndarray
    eigenvalues: np.ndarray
    valid: np.ndarray

    def distances(self) -> np.ndarray:
        d = self.points[:, None, :] - self.points[None, :, :]
        return np.linalg.norm(d, axis=2)


@dataclass
class GravitySolution:
    direction: np.ndarray  # unit, embedding frame
    constraint_rank: int
    sign_resolved: bool
    prenorm_norm: float  # |least-squares solution| before renormalization


@dataclass
class ChiralityVerdict:
    chosen: str  # "original" | "mirrored" | "undetermined"
    score_original: float
    score_mirrored: float
    cp_sum: float


@dataclass
class SfcResult:
    timestamp: int
    reference: int
    positions: dict  # robot -> 3-vector in the reference body frame
    orientations: dict  # robot -> quaternion in the reference body frame
    rotation_observable: np.ndarray
    position_observable: np.ndarray
    gravity_rf: np.ndarray | None = None
    distance_inliers: np.ndarray | None = None
    refined: bool = False
    refine_failed: bool = False


def build_distance_matrix(frame, n) -> np.ndarray:
    """Symmetric range matrix; reciprocal (and repeated) readings averaged."""
    total = np.zeros((n, n))
    count = np.zeros((n, n), dtype=int)
    for dm in frame.distances:
        i, j = dm.from_robot, dm.to_robot
        if i == j or i >= n or j >= n:
            continue
        total[i, j] += dm.distance
        total[j, i] += dm.distance
        count[i, j] += 1
        count[j, i] += 1
    missing = [(i, j) for i in range(n) for j in range(i + 1, n) if count[i, j] == 0]
    if missing:
        raise IncompleteDistanceMatrix(missing)
    D = np.zeros((n, n))
    off = count > 0
    D[off] = total[off] / count[off]
    return D


def mds_embed(D: np.ndarray) -> Embedding:
    """Closed-form embedding of a squared-distance Gram spectrum.

    Keeps the top three eigenpairs, clamping negative (noise-induced)
    eigenvalues to zero; lower-rank geometries come back padded with zero
    columns.
    """
    n = len(D)
    if n < 2:
        raise ValueError("need at least two robots to embed")
    H = np.eye(n) - np.full((n, n), 1.0 / n)
    B = -0.5 * H @ (D * D) @ H
    vals, vecs = np.linalg.eigh(B)
    order = np.argsort(vals)[::-1][: min(3, n)]
    lam = np.maximum(vals[order], 0.0)
    X = np.zeros((n, 3))
    X[:, : len(order)] = vecs[:, order] * np.sqrt(lam)
    lam3 = np.zeros(3)
    lam3[: len(order)] = lam
    return Embedding(points=X, eigenvalues=lam3, valid=np.ones(n, dtype=bool))


def _first_gravity_per_robot(frame) -> dict:
    out = {}
    for gm in frame.gravities:
        if gm.robot not in out:
            out[gm.robot] = gm
    return out


def _cam_matrix(extrinsics, robot) -> np.ndarray:
    return core.quat_to_matrix(extrinsics[robot].cam_rotation)


def estimate_gravity(frame, embedding, extrinsics, noise, mask=None) -> GravitySolution:
    """Shared gravity direction in the embedding frame.

    Every inlier bearing whose observer also carries a gravity reading
    contributes one row: the unit baseline in the embedding must make the
    same angle with gravity as the measured pair does in the body frame.
    The normal equations are solved by pseudoinverse; rank 2 leaves a sign
    along the null direction which is settled by comparing plane-normal
    projections against their body-frame counterparts.
    """
    P = embedding.points
    n = len(P)
    grav = _first_gravity_per_robot(frame)
    sigma_theta = math.sqrt(noise.bearing_sigma**2 + noise.gravity_sigma**2)
    rows, rhs = [], []
    by_observer: dict[int, list] = {}
    for idx, b in enumerate(frame.bearings):
        if mask is not None and not mask.kept(idx):
            continue
        gm = grav.get(b.observer)
        if gm is None or b.target >= n or b.target == b.observer:
            continue
        d = P[b.target] - P[b.observer]
        nd = np.linalg.norm(d)
        if nd < MIN_BASELINE:
            continue
        ptilde = d / nd
        body = _cam_matrix(extrinsics, b.observer) @ b.direction
        core.note_gravity_read()
        cos_th = min(1.0, max(-1.0, float(body @ gm.direction)))
        sig = max(math.sqrt(1.0 - cos_th * cos_th) * sigma_theta, 1e-2)
        rows.append(ptilde / sig)
        rhs.append(cos_th / sig)
        by_observer.setdefault(b.observer, []).append((ptilde, body, gm.direction))
    if not rows:
        raise GravityUnderconstrained("no co-located bearing/gravity pairs")

    A = np.array(rows)
    bvec = np.array(rhs)
    G = A.T @ A
    U, s, Vt = np.linalg.svd(G)
    tol = s[0] * 1e-12
    rank = int(np.sum(s > tol)) if s[0] > 0 else 0
    if rank < 2:
        raise GravityUnderconstrained(f"gravity constraint rank {rank}")
    s_inv = np.array([1.0 / v if v > tol else 0.0 for v in s])
    g0 = Vt.T @ (s_inv * (U.T @ (A.T @ bvec)))
    prenorm = float(np.linalg.norm(g0))

    if rank == 3:
        if prenorm < 1e-12:
            raise GravityUnderconstrained("gravity solution collapsed to zero")
        return GravitySolution(g0 / prenorm, rank, True, prenorm)

    # rank 2: extend along the null direction up to unit norm, sign from the
    # bearing-plane normals
    nu = Vt[2]
    mag = math.sqrt(max(0.0, 1.0 - prenorm**2))
    if mag < 1e-9:
        return GravitySolution(g0 / prenorm, rank, True, prenorm)
    t = 0.0
    for entries in by_observer.values():
        for (p1, b1, zg), (p2, b2, _) in itertools.combinations(entries, 2):
            t += float(np.cross(p1, p2) @ nu) * float(np.cross(b1, b2) @ zg)
    if abs(t) < 1e-12:
        raise GravityUnderconstrained("reflection sign of gravity unresolved")
    g = g0 + math.copysign(mag, t) * nu
    return GravitySolution(g / np.linalg.norm(g), rank, True, prenorm)


def align_gravity_to_z(embedding, gravity: GravitySolution):
    """Rotate the embedding so the estimated gravity points along +z."""
    R = core.rotation_between(gravity.direction, EZ)
    rotated = Embedding(
        points=embedding.points @ R.T,
        eigenvalues=embedding.eigenvalues.copy(),
        valid=embedding.valid.copy(),
    )
    return rotated, R


def solve_wahba(body_dirs, ref_dirs):
    """Best orthogonal and best proper alignment of paired unit directions.

    ``body_dirs`` is a list of (unit vector, weight); returns ``(G, R)``
    where G is the unconstrained orthogonal optimum (its determinant tells
    whether a reflection fits better) and R is the proper rotation mapping
    body directions onto reference directions.
    """
    if len(body_dirs) < 2:
        raise DegenerateDirections("need at least two direction pairs")
    bodies = np.array([b for b, _ in body_dirs])
    weights = np.array([w for _, w in body_dirs])
    refs = np.asarray(ref_dirs, dtype=float)
    crosses = np.cross(bodies[:, None, :], bodies[None, :, :])
    if float(np.max(np.linalg.norm(crosses, axis=2))) <= 1e-8:
        raise DegenerateDirections("direction pairs are mutually parallel")
    A = (refs * weights[:, None]).T @ bodies
    U, _, Vt = np.linalg.svd(A)
    G = U @ Vt
    det = float(np.linalg.det(G))
    R = U @ np.diag([1.0, 1.0, det]) @ Vt
    return G, R


def coplanarity(body_dirs, gravity_dir, noise) -> float:
    """Spread of an observer's direction bundle out of its best-fit plane.

    The bundle is the noise-weighted body-frame bearing set together with
    the observer's own (zero) entry and, when supplied, its gravity
    reading. Returns the smallest principal ratio, in [0, 1/3]; fewer than
    three bearings (or two without gravity) give 0.
    """
    k = len(body_dirs)
    wg = 1 if gravity_dir is not None else 0
    if not (k >= 3 or (k == 2 and wg)):
        return 0.0
    entries = [b / noise.bearing_sigma for b in body_dirs]
    entries.append(np.zeros(3))
    if wg:
        entries.append(gravity_dir / noise.gravity_sigma)
    M = np.array(entries)
    denom = k + 1 + wg
    Q = M - M.sum(axis=0) / denom
    C = Q.T @ Q / denom
    lam = np.linalg.eigvalsh(C)
    tr = float(lam.sum())
    if tr <= 0.0:
        return 0.0
    return float(lam[0] / tr)


def determine_chirality(frame, embedding, gravity_uf, extrinsics, mask, noise) -> ChiralityVerdict:
    """Pick between the embedding and its mirror image.

    For each observer with a genuinely three-dimensional direction bundle,
    the unconstrained alignment of its body directions onto the candidate
    baselines votes +1 or -1 (its determinant); votes are weighted by the
    bundle's out-of-plane spread. The mirror negates the first embedding
    axis, which leaves a z-aligned gravity untouched, so call this after
    gravity alignment when gravity is in play.
    """
    P = embedding.points
    n = len(P)
    grav = _first_gravity_per_robot(frame) if gravity_uf is not None else {}
    by_observer: dict[int, list] = {}
    for idx, b in enumerate(frame.bearings):
        if not mask.kept(idx) or b.target >= n or b.target == b.observer:
            continue
        by_observer.setdefault(b.observer, []).append(b)

    mirror = np.array([-1.0, 1.0, 1.0])
    score_o = score_m = cp_sum = 0.0
    for i, blist in sorted(by_observer.items()):
        gm = grav.get(i)
        Rc = _cam_matrix(extrinsics, i)
        bodies, refs = [], []
        for b in blist:
            d = P[b.target] - P[i]
            nd = np.linalg.norm(d)
            if nd < MIN_BASELINE:
                continue
            bodies.append(Rc @ b.direction)
            refs.append(d / nd)
        if gm is not None:
            core.note_gravity_read()
        cp = coplanarity(bodies, gm.direction if gm is not None else None, noise)
        if cp <= 0.0:
            continue
        cp_sum += cp
        pairs = [(bd, 1.0 / noise.bearing_sigma) for bd in bodies]
        ref_list = list(refs)
        if gm is not None:
            pairs.append((gm.direction, 1.0 / noise.gravity_sigma))
            ref_list.append(gravity_uf)
        G_o, _ = solve_wahba(pairs, ref_list)
        G_m, _ = solve_wahba(pairs, [r * mirror for r in ref_list])
        score_o += cp * float(np.linalg.det(G_o))
        score_m += cp * float(np.linalg.det(G_m))

    threshold = max(0.5 * cp_sum, 0.001)
    best = max(score_o, score_m)
    if best > threshold:
        chosen = "original" if score_o >= score_m else "mirrored"
    else:
        chosen = "undetermined"
    return ChiralityVerdict(chosen, score_o, score_m, cp_sum)


def estimate_yaw(observer, bearings, gravity_meas, embedding, extrinsics) -> float:
    """Heading of one robot in a gravity-aligned embedding.

    Each bearing is lifted to the intermediate frame that levels the
    measured gravity, then compared against its baseline in the horizontal
    plane; the per-bearing angles are combined by circular mean.
    """
    core.note_gravity_read()
    Rhat = core.rotation_between(gravity_meas.direction, EZ)
    Rc = _cam_matrix(extrinsics, observer)
    P = embedding.points
    sin_sum = cos_sum = 0.0
    for b in bearings:
        u = Rhat @ (Rc @ b.direction)
        d = P[b.target] - P[observer]
        ptilde = d / np.linalg.norm(d)
        nu = math.hypot(u[0], u[1])
        npx = math.hypot(ptilde[0], ptilde[1])
        if nu < 1e-6 or npx < 1e-6:
            raise YawDegenerate(f"bearing {observer}->{b.target} projects to zero")
        psi = math.atan2(u[0] * ptilde[1] - u[1] * ptilde[0], u[0] * ptilde[0] + u[1] * ptilde[1])
        sin_sum += math.sin(psi)
        cos_sum += math.cos(psi)
    return math.atan2(sin_sum, cos_sum)


def estimate_rotations(frame, embedding, use_gravity, extrinsics, mask):
    """Per-robot rotations in the embedding frame.

    Robots carrying a gravity reading and at least one inlier bearing get
    the leveled-yaw construction; the rest need two non-parallel inlier
    bearings for a direction-alignment solve. Returns (rotations,
    gravity_used) where unobservable robots hold None.
    """
    P = embedding.points
    n = len(P)
    grav = _first_gravity_per_robot(frame) if use_gravity else {}
    by_observer: dict[int, list] = {}
    for idx, b in enumerate(frame.bearings):
        if not mask.kept(idx) or b.target >= n or b.target == b.observer:
            continue
        d = P[b.target] - P[b.observer]
        if np.linalg.norm(d) < MIN_BASELINE:
            continue
        by_observer.setdefault(b.observer, []).append(b)

    rotations: list = [None] * n
    gravity_used = [False] * n
    for i in range(n):
        blist = by_observer.get(i, [])
        gm = grav.get(i)
        if gm is not None and blist:
            try:
                psi = estimate_yaw(i, blist, gm, embedding, extrinsics)
            except YawDegenerate:
                continue
            core.note_gravity_read()
            rotations[i] = core.rotz(psi) @ core.rotation_between(gm.direction, EZ)
            gravity_used[i] = True
        elif len(blist) >= 2:
            Rc = _cam_matrix(extrinsics, i)
            pairs, refs = [], []
            for b in blist:
                d = P[b.target] - P[i]
                pairs.append((Rc @ b.direction, 1.0))
                refs.append(d / np.linalg.norm(d))
            try:
                _, R = solve_wahba(pairs, refs)
            except DegenerateDirections:
                continue
            rotations[i] = R
    return rotations, gravity_used


def _count_rotation_support(body_dirs) -> bool:
    """True when the direction set spans more than a single line."""
    if len(body_dirs) < 2:
        return False
    arr = np.array(body_dirs)
    crosses = np.cross(arr[:, None, :], arr[None, :, :])
    return float(np.max(np.linalg.norm(crosses, axis=2))) > 1e-8


def extract_relative_poses(
    frame, embedding, rotations, gravity_used, reference, extrinsics, noise, mask, gravity_uf
) -> SfcResult:
    """Re-express the embedding in the reference body frame.

    Before emitting, every surviving measurement is re-predicted from the
    candidate poses; anything beyond five sigma is dropped and rotation
    observability is recounted with the survivors. The reference robot's
    rotation is a hard prerequisite.
    """
    P = embedding.points
    n = len(P)

    # consistency gate
    for idx, b in enumerate(frame.bearings):
        if not mask.kept(idx) or b.target >= n or b.target == b.observer:
            continue
        Ri = rotations[b.observer]
        if Ri is None:
            continue
        d = P[b.target] - P[b.observer]
        nd = np.linalg.norm(d)
        if nd < MIN_BASELINE:
            continue
        pred = (Ri @ _cam_matrix(extrinsics, b.observer)).T @ (d / nd)
        ang = math.acos(min(1.0, max(-1.0, float(pred @ b.direction))))
        if ang > 5.0 * noise.bearing_sigma:
            mask.weights[idx] = 0.0
    distance_keep = np.ones(len(frame.distances), dtype=bool)
    for k, dm in enumerate(frame.distances):
        if dm.from_robot >= n or dm.to_robot >= n:
            distance_keep[k] = False
            continue
        err = abs(float(np.linalg.norm(P[dm.to_robot] - P[dm.from_robot])) - dm.distance)
        if err > 5.0 * noise.distance_sigma:
            distance_keep[k] = False

    # recount rotation observability with the surviving bearings
    kept_bodies: dict[int, list] = {}
    for idx, b in enumerate(frame.bearings):
        if not mask.kept(idx) or b.target >= n or b.target == b.observer:
            continue
        kept_bodies.setdefault(b.observer, []).append(
            _cam_matrix(extrinsics, b.observer) @ b.direction
        )
    rot_obs = np.zeros(n, dtype=bool)
    for i in range(n):
        if rotations[i] is None:
            continue
        dirs = kept_bodies.get(i, [])
        if gravity_used[i]:
            rot_obs[i] = len(dirs) >= 1
        else:
            rot_obs[i] = _count_rotation_support(dirs)

    if not rot_obs[reference]:
        raise ReferenceUnobservable(f"rotation of reference robot {reference} is not constrained")

    R_rf = rotations[reference]
    positions = {i: R_rf.T @ (P[i] - P[reference]) for i in range(n)}
    orientations = {
        i: core.matrix_to_quat(R_rf.T @ rotations[i]) for i in range(n) if rot_obs[i]
    }
    gravity_rf = R_rf.T @ gravity_uf if gravity_uf is not None else None
    return SfcResult(
        timestamp=frame.timestamp,
        reference=reference,
        positions=positions,
        orientations=orientations,
        rotation_observable=rot_obs,
        position_observable=embedding.valid.copy(),
        gravity_rf=gravity_rf,
        distance_inliers=distance_keep,
    )


def run_sfc(frame, extrinsics, noise, reference, prob_threshold: float = 0.95):
    """Closed-form pipeline over one frame.

    Returns (SfcResult, BearingMask, Embedding); raises a SingleFrameError
    subclass when the frame cannot produce output (incomplete ranges,
    unresolvable reflection, unconstrained reference).
    """
    n = len(extrinsics)
    D = build_distance_matrix(frame, n)
    embedding = mds_embed(D)
    mask = outliers.reject_outliers(frame, embedding.points, noise, prob_threshold)

    gravity_uf = None
    if noise.gravity_enabled and frame.gravities:
        try:
            sol = estimate_gravity(frame, embedding, extrinsics, noise, mask)
            embedding, _ = align_gravity_to_z(embedding, sol)
            gravity_uf = EZ.copy()
        except GravityUnderconstrained:
            gravity_uf = None

    verdict = determine_chirality(frame, embedding, gravity_uf, extrinsics, mask, noise)
    if verdict.chosen == "mirrored":
        embedding = Embedding(
            points=embedding.points * np.array([-1.0, 1.0, 1.0]),
            eigenvalues=embedding.eigenvalues,
            valid=embedding.valid,
        )
    if verdict.chosen == "undetermined":
        rotations, gravity_used = [None] * n, [False] * n
    else:
        rotations, gravity_used = estimate_rotations(
            frame, embedding, gravity_uf is not None, extrinsics, mask
        )
    result = extract_relative_poses(
        frame, embedding, rotations, gravity_used, reference, extrinsics, noise, mask, gravity_uf
    )
    return result, mask, embedding


def run_sfo(frame, sfc_result, mask, extrinsics, noise) -> SfcResult:
    """Robust nonlinear refinement seeded by the closed form.

    Optimizes every emitted position, every emitted orientation, and (when
    present) the shared gravity direction, with the reference robot frozen
    at identity. Full translational extrinsics enter here. Observability
    flags are carried over unchanged; on solver failure the closed-form
    result comes back flagged.
    """
    n = len(extrinsics)
    ref = sfc_result.reference
    problem = solver.Problem()
    p_blocks, q_blocks = {}, {}
    for i in sorted(sfc_result.positions):
        p_blocks[i] = problem.add_block(
            solver.EUCLIDEAN, sfc_result.positions[i], frozen=(i == ref), name=f"p{i}"
        )
    for i in sorted(sfc_result.orientations):
        q_blocks[i] = problem.add_block(
            solver.QUATERNION, sfc_result.orientations[i], frozen=(i == ref), name=f"q{i}"
        )
    g_block = None
    if sfc_result.gravity_rf is not None:
        g_block = problem.add_block(solver.SPHERE, sfc_result.gravity_rf, name="g")

    order = []
    p_slot, q_slot = {}, {}
    for i, blk in p_blocks.items():
        p_slot[i] = len(order)
        order.append(blk)
    for i, blk in q_blocks.items():
        q_slot[i] = len(order)
        order.append(blk)
    ext = residuals.stack_extrinsics(extrinsics)

    p_js = np.array(list(p_slot), dtype=int)
    q_js = np.array(list(q_slot), dtype=int)
    n_p = len(p_slot)

    def assemble(values):
        P = np.zeros((n, 3))
        Rm = np.tile(np.eye(3), (n, 1, 1))
        if n_p:
            P[p_js] = np.stack(values[:n_p])
        if len(q_js):
            Rm[q_js] = core.quat_to_matrix_batch(np.stack(values[n_p : n_p + len(q_js)]))
        return P, Rm

    keep = sfc_result.distance_inliers
    d_rows = [
        (k, dm)
        for k, dm in enumerate(frame.distances)
        if (keep is None or keep[k]) and dm.from_robot in p_blocks and dm.to_robot in p_blocks
    ]
    trash = len(order)
    if d_rows:
        da = np.array([dm.from_robot for _, dm in d_rows])
        db = np.array([dm.to_robot for _, dm in d_rows])
        dz = np.array([dm.distance for _, dm in d_rows])
        d_slots = [
            np.array([slots.get(r, trash) for r in ids])
            for ids in (da, db)
            for slots in (p_slot, q_slot)
        ]

        def dist_fn(values, jac):
            P, Rm = assemble(values)
            r, jc = residuals.distance_batch_terms(da, db, dz, P, Rm, ext, jac=jac)
            if not jac:
                return r, None
            jacs = residuals.scatter_row_jacobians(
                list(zip(d_slots, (jc["p_a"], jc["th_a"], jc["p_b"], jc["th_b"]))),
                len(order), len(r), 1,
            )
            return r, jacs

        problem.add_residual(
            order,
            dist_fn,
            sqrt_info=1.0 / noise.distance_sigma,
            loss=("huber", 1.0),
            loss_chunk=1,
            name="ranges",
        )

    b_rows = [
        (k, bm)
        for k, bm in enumerate(frame.bearings)
        if mask.kept(k) and bm.observer in q_blocks and bm.target in q_blocks
    ]
    if b_rows:
        bo = np.array([bm.observer for _, bm in b_rows])
        bt = np.array([bm.target for _, bm in b_rows])
        bz = np.array([bm.direction for _, bm in b_rows])
        b_slots = [
            np.array([slots.get(r, trash) for r in ids])
            for ids in (bo, bt)
            for slots in (p_slot, q_slot)
        ]

        def bear_fn(values, jac):
            P, Rm = assemble(values)
            r, jc = residuals.bearing_batch_terms(bo, bt, bz, P, Rm, ext, jac=jac)
            if not jac:
                return r.ravel(), None
            jacs = residuals.scatter_row_jacobians(
                list(zip(b_slots, (jc["p_obs"], jc["th_obs"], jc["p_tgt"], jc["th_tgt"]))),
                len(order), len(r), 3,
            )
            return r.ravel(), jacs

        problem.add_residual(
            order,
            bear_fn,
            sqrt_info=1.0 / noise.bearing_sigma,
            loss=("huber", 1.0),
            loss_chunk=3,
            name="bearings",
        )

    if g_block is not None:
        g_rows = []
        for robot, gm in sorted(_first_gravity_per_robot(frame).items()):
            if robot in q_blocks:
                core.note_gravity_read()
                g_rows.append((robot, gm.direction))
        if g_rows:
            g_order = [q_blocks[robot] for robot, _ in g_rows] + [g_block]
            gz = np.array([z for _, z in g_rows])
            m_g = len(g_rows)

            def grav_fn(values, jac):
                Rm = np.stack([core.quat_to_matrix(v) for v in values[:-1]])
                g = values[-1]
                r, jc = residuals.gravity_batch_terms(np.arange(m_g), gz, Rm, g, jac=jac)
                if not jac:
                    return r.ravel(), None
                jacs = []
                for k in range(m_g):
                    J = np.zeros((m_g, 3, 3))
                    J[k] = jc["th"][k]
                    jacs.append(J.reshape(3 * m_g, 3))
                basis = core.sphere_tangent_basis(g)
                jacs.append((jc["g"] @ basis).reshape(3 * m_g, 2))
                return r.ravel(), jacs

            problem.add_residual(
                g_order, grav_fn, sqrt_info=1.0 / noise.gravity_sigma, name="gravity"
            )

    try:
        # the closed form already lands near the optimum; a relative cost
        # plateau of 1e-6 is far below the measurement noise floor
        problem.solve(max_iterations=30, cost_tol=1e-6)
    except (solver.NonFiniteResidual, solver.SingularNormalEquations, residuals.DegenerateGeometry):
        return dataclasses.replace(sfc_result, refine_failed=True)

    positions = {i: blk.value.copy() for i, blk in p_blocks.items()}
    orientations = {i: blk.value.copy() for i, blk in q_blocks.items()}
    return dataclasses.replace(
        sfc_result,
        positions=positions,
        orientations=orientations,
        gravity_rf=None if g_block is None else g_block.value.copy(),
        refined=True,
        refine_failed=False,
    )
