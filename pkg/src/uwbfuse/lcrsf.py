"""Loosely-coupled range-SLAM fusion.

Pipeline: estimate the initial anchor-frame pose from a stationary period
(position + yaw, pitch/roll fixed by the body convention), then stream SLAM
poses: each new pose is predicted by composing the previous estimate with the
measured SLAM increment, incoming ranges are gated against that prediction,
and a sliding window over the most recent poses is re-optimized with
relative-pose factors plus in-window range factors. Anchors and biases come
from calibration and stay constant; poses leaving the window are committed
and never revised, with the last committed pose kept frozen at the window
head so the factor chain stays anchored.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import factors, geometry, solver
from .errors import DegenerateGeometry, InsufficientInit, WindowUnderflow
from .factors import LinkBias, TagExtrinsics
from .geometry import Pose, Rotation, Trajectory

__all__ = [
    "FusionConfig",
    "InitResult",
    "FusionState",
    "WindowResult",
    "WindowTiming",
    "FusionOutput",
    "initialize",
    "predict_pose",
    "gate_measurement",
    "interpolated_range_residual",
    "process_window",
    "run_fusion",
]

_MIN_RANGE_NORM = 1e-9


@dataclass
class FusionConfig:
    window: int = 50                  # poses per window
    stride: int = 10                  # poses committed per solve
    tau: float = 0.5                  # online gate threshold, meters
    cauchy_scale: float = 0.5         # robust loss on in-window range factors
    odom_sigma_rot: float = 0.01      # rad per increment
    odom_sigma_trans: float = 0.01    # m per increment
    stationary_s: float = 5.0
    roll_convention: float = math.pi  # body roll fixed at initialization
    init_pos_sigma: float = 0.1       # weak prior anchoring the first window
    init_yaw_sigma: float = math.radians(2.0)
    init_tilt_sigma: float = math.radians(0.5)
    yaw_starts: int = 8               # multi-start seeds for initialization
    min_init_measurements: int = 4
    min_init_anchors: int = 2
    solve_options: solver.SolveOptions = field(
        default_factory=lambda: solver.SolveOptions(max_iters=20)
    )
    init_solve_options: solver.SolveOptions = field(
        default_factory=lambda: solver.SolveOptions(
            max_iters=100, rel_tol=1e-12, grad_tol=1e-14
        )
    )

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must hold at least 2 poses")
        if not (1 <= self.stride <= self.window):
            raise ValueError("stride must satisfy 1 <= stride <= window")
        if self.stationary_s <= 0:
            raise ValueError("stationary duration must be positive")

    def sqrt_info(self) -> np.ndarray:
        return np.concatenate(
            [np.full(3, 1.0 / self.odom_sigma_rot), np.full(3, 1.0 / self.odom_sigma_trans)]
        )


@dataclass
class InitResult:
    pose: Pose
    cost: float
    ambiguous: bool                    # near-tied yaw optima differing > 5 deg
    candidates: list                   # (yaw_rad, final_cost) per start
    note: str = ""


# ---------------------------------------------------------------------------
# in-window interpolated range factor
# ---------------------------------------------------------------------------

def _cross_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def _interval_range_eval(vi, vj, us, ls, Ps, corrected, want_jac):
    """Residuals (and pose-pair Jacobians) of ranges interpolated between two
    estimated poses.

    vi, vj are pose block values [p, q]; us the interpolation weights; ls the
    per-row tag offsets; Ps the anchors; corrected the bias-corrected ranges.
    This sits on the per-window hot path, hence matmul/manual-cross forms.
    """
    pi, qi = vi[:3], vi[3:]
    pj, qj = vj[:3], vj[3:]
    Ri = geometry._quat_to_matrix(qi)

    q_rel = geometry._qnormalize(geometry._qmul(geometry._qconj(qi), qj))
    xi = geometry._quat_to_rotvec(q_rel)
    th = math.sqrt(float(xi @ xi))
    if th > 1e-12:
        K = geometry.skew(xi / th)
    else:
        K = np.zeros((3, 3))
    K2 = K @ K
    Ieye = geometry._EYE3

    a = us * th
    sa = np.sin(a)
    ca = np.cos(a)
    # Exp(u*xi) for all rows, shared axis
    E = Ieye + sa[:, None, None] * K + (1.0 - ca)[:, None, None] * K2
    Rm = Ri @ E

    pm = (1.0 - us)[:, None] * pi + us[:, None] * pj
    v = pm + (Rm @ ls[:, :, None])[:, :, 0] - Ps
    n = np.sqrt(np.sum(v * v, axis=1))
    if np.any(n <= _MIN_RANGE_NORM):
        raise DegenerateGeometry("tag coincides with anchor; range Jacobian undefined")
    r = n - corrected
    if not want_jac:
        return r, None

    dirs = v / n[:, None]
    # right-perturbation of the interpolated rotation:
    #   d(theta_m) = A0 d(theta_i) + A1 d(theta_j)
    small = a < 1e-7
    c1 = np.where(small, 0.5 * a, np.divide(1.0 - ca, a, out=np.zeros_like(a), where=~small))
    c2 = np.where(small, a * a / 6.0, np.divide(a - sa, a, out=np.zeros_like(a), where=~small))
    Jr_u = Ieye - c1[:, None, None] * K + c2[:, None, None] * K2
    # Jr(xi)^-1 and Jl(xi)^-1 share the skew pair: I +/- 0.5 Kv + c Kv^2
    Kv = th * K
    Kv2 = (th * th) * K2
    if th < 1e-5:
        cj = 1.0 / 12.0 + th * th / 720.0
    else:
        cj = 1.0 / (th * th) - (1.0 + math.cos(th)) / (2.0 * th * math.sin(th))
    half_Kv = 0.5 * Kv
    cKv2 = cj * Kv2
    Jr_inv = Ieye + half_Kv + cKv2
    Jl_inv = Ieye - half_Kv + cKv2
    A1 = us[:, None, None] * (Jr_u @ Jr_inv)
    A0 = np.transpose(E, (0, 2, 1)) - us[:, None, None] * (Jr_u @ Jl_inv)

    m = len(us)
    w1 = (dirs[:, None, :] @ Rm)[:, 0, :]
    T = -_cross_rows(w1, ls)
    Ji = np.empty((m, 6))
    Jj = np.empty((m, 6))
    Ji[:, 0:3] = (T[:, None, :] @ A0)[:, 0, :]
    Jj[:, 0:3] = (T[:, None, :] @ A1)[:, 0, :]
    Ji[:, 3:6] = (1.0 - us)[:, None] * dirs
    Jj[:, 3:6] = us[:, None] * dirs
    return r, [Ji, Jj]


def interpolated_range_residual(
    pose_i: Pose,
    pose_j: Pose,
    u: float,
    tag_offset,
    anchor,
    bias: float,
    d: float,
    want_jacobians: bool = False,
):
    """Scalar form of the in-window range factor (one measurement).

    The measurement pose is slerp/lerp-interpolated between the two estimated
    poses at weight u; e = ||p_m + R_m l - P|| - (d + b). Jacobians are (1, 6)
    per pose, tangent ordered [rotation; translation].
    """
    vi = np.concatenate([pose_i.p, pose_i.r.quat])
    vj = np.concatenate([pose_j.p, pose_j.r.quat])
    r, jacs = _interval_range_eval(
        vi,
        vj,
        np.array([float(u)]),
        np.asarray(tag_offset, dtype=float)[None, :],
        np.asarray(anchor, dtype=float)[None, :],
        np.array([float(d) + float(bias)]),
        want_jacobians,
    )
    if not want_jacobians:
        return float(r[0]), None
    return float(r[0]), (jacs[0], jacs[1])


def interval_range_block(
    id_i: str,
    id_j: str,
    us: np.ndarray,
    offsets: np.ndarray,
    anchors: np.ndarray,
    corrected: np.ndarray,
    cauchy_scale: float | None,
) -> solver.ResidualBlock:
    """All range measurements of one inter-pose interval as one batched block."""
    us = np.asarray(us, dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    anchors = np.asarray(anchors, dtype=float)
    corrected = np.asarray(corrected, dtype=float)

    def fn(values, want_jac, ctx):
        return _interval_range_eval(values[0], values[1], us, offsets, anchors, corrected, want_jac)

    return solver.ResidualBlock(
        dim=len(us),
        params=(id_i, id_j),
        fn=fn,
        loss=cauchy_scale,
        elementwise=True,
    )


def pose_prior_block(
    id0: str,
    p_ref: np.ndarray,
    rot_ref: Rotation,
    pos_sigma: float,
    yaw_sigma: float,
    tilt_sigma: float,
) -> solver.ResidualBlock:
    """Prior anchoring the first window's gauge at the initialization pose.

    Position and heading are held weakly; the pitch/roll components are held
    tightly because the initialization convention fixes them exactly. Without
    the tilt term a fully stationary first window with collinear tag offsets
    has an unobservable common rotation (relative rotations are identity and
    the tags do not move), which the solver will happily wander along.

    The rotation residual is the body-frame log of R_ref^T R, weighted per
    axis: the world-z direction expressed in the body frame gets 1/yaw_sigma,
    the orthogonal complement 1/tilt_sigma.
    """
    p_ref = np.asarray(p_ref, dtype=float)
    R_ref = rot_ref.as_matrix()
    a = R_ref.T @ np.array([0.0, 0.0, 1.0])  # world z in the body frame
    P_yaw = np.outer(a, a)
    W = P_yaw / yaw_sigma + (np.eye(3) - P_yaw) / tilt_sigma

    def fn(values, want_jac, ctx):
        v = values[0]
        R = geometry._quat_to_matrix(v[3:])
        er = geometry._quat_to_rotvec(geometry._matrix_to_quat(R_ref.T @ R))
        r = np.concatenate([W @ er, (v[:3] - p_ref) / pos_sigma])
        if not want_jac:
            return r, None
        J = np.zeros((6, 6))
        J[0:3, 0:3] = W @ geometry.right_jacobian_inv(er)
        J[3:6, 3:6] = np.eye(3) / pos_sigma
        return r, [J]

    return solver.ResidualBlock(dim=6, params=(id0,), fn=fn)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _init_range_block(offsets, anchors, corrected, cauchy_scale) -> solver.ResidualBlock:
    offsets = np.asarray(offsets, dtype=float)
    anchors = np.asarray(anchors, dtype=float)
    corrected = np.asarray(corrected, dtype=float)

    def fn(values, want_jac, ctx):
        p0 = values[0]
        psi = float(values[1][0])
        c, s = math.cos(psi), math.sin(psi)
        Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        dRz = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
        v = offsets @ Rz.T + p0[None, :] - anchors
        n = np.linalg.norm(v, axis=1)
        if np.any(n <= _MIN_RANGE_NORM):
            raise DegenerateGeometry("tag coincides with anchor; range Jacobian undefined")
        r = n - corrected
        if not want_jac:
            return r, None
        dirs = v / n[:, None]
        dpsi = np.sum(dirs * (offsets @ dRz.T), axis=1)
        return r, [dirs, dpsi[:, None]]

    return solver.ResidualBlock(
        dim=len(corrected),
        params=("p0", "psi"),
        fn=fn,
        loss=cauchy_scale,
        elementwise=True,
    )


def _seed_positions(anchor_ids, anchors, per_anchor_ranges) -> list:
    """Position seeds for the initialization multi-start.

    The closed-form multilateration fix plus its mirror image about the
    anchors' best-fit plane: range spheres intersect in two near-consistent
    points when the anchors are close to coplanar, and the nonlinear fit must
    be started in both basins to find the global optimum. Falls back to the
    anchor centroid when the linear system is underdetermined.
    """
    pts = np.array([anchors[a] for a in anchor_ids])
    centroid = pts.mean(axis=0)
    seeds = []
    if len(anchor_ids) >= 4:
        med = np.array([np.median(per_anchor_ranges[a]) for a in anchor_ids])
        A = np.hstack([2.0 * pts, -np.ones((len(pts), 1))])
        b = np.sum(pts * pts, axis=1) - med * med
        sol, _, rank, sv = np.linalg.lstsq(A, b, rcond=None)
        if rank == 4 and sv[-1] > 0 and (sv[0] / sv[-1]) < 1e8 and np.all(np.isfinite(sol)):
            p = sol[:3]
            seeds.append(p)
            _, _, vt = np.linalg.svd(pts - centroid)
            normal = vt[2]
            mirrored = p - 2.0 * float((p - centroid) @ normal) * normal
            seeds.append(mirrored)
    if not seeds:
        seeds.append(centroid)
    return seeds


def initialize(
    stationary_ranges,
    anchors: dict,
    biases: LinkBias,
    extrinsics: TagExtrinsics,
    cfg: FusionConfig,
    t0: float | None = None,
) -> InitResult:
    """Estimate the initial anchor-frame position and yaw from a stationary
    period; pitch and roll are fixed by the configured body convention.

    Runs the nonlinear fit from several evenly spaced yaw seeds and keeps the
    best final cost. When near-tied optima disagree in yaw by more than 5
    degrees the result is flagged ambiguous (typical for zero tag lever arm,
    where yaw is unobservable).
    """
    usable = [
        m for m in stationary_ranges if m.tag_id in extrinsics and m.anchor_id in anchors
    ]
    seen_anchors = sorted({m.anchor_id for m in usable})
    if len(usable) < cfg.min_init_measurements or len(seen_anchors) < cfg.min_init_anchors:
        raise InsufficientInit(
            f"{len(usable)} usable stationary measurements over {len(seen_anchors)} anchors"
        )

    offs = np.array([extrinsics.offset(m.tag_id) for m in usable])
    pts = np.array([anchors[m.anchor_id] for m in usable])
    corrected = np.array([m.d + biases.get(m.tag_id, m.anchor_id) for m in usable])
    per_anchor = {
        a: [m.d + biases.get(m.tag_id, m.anchor_id) for m in usable if m.anchor_id == a]
        for a in seen_anchors
    }
    seeds = _seed_positions(seen_anchors, anchors, per_anchor)

    candidates = []
    best = None
    for p_seed in seeds:
        for j in range(cfg.yaw_starts):
            yaw0 = -math.pi + 2.0 * math.pi * j / cfg.yaw_starts
            problem = solver.Problem()
            problem.add_block(solver.ParameterBlock("p0", solver.BlockKind.POINT3, p_seed))
            problem.add_block(solver.ParameterBlock("psi", solver.BlockKind.YAW, [yaw0]))
            problem.add_residual(_init_range_block(offs, pts, corrected, cfg.cauchy_scale))
            report = solver.solve(problem, cfg.init_solve_options)
            yaw = float(problem.block("psi").values[0])
            p = problem.block("p0").values.copy()
            candidates.append((yaw, report.final_cost))
            if best is None or report.final_cost < best[2]:
                best = (p, yaw, report.final_cost)

    p_best, yaw_best, cost_best = best
    slack = cost_best * 1.01 + 1e-12 * len(usable)
    near = [yaw for yaw, c in candidates if c <= slack]
    ambiguous = False
    for i in range(len(near)):
        for j in range(i + 1, len(near)):
            d = math.atan2(math.sin(near[i] - near[j]), math.cos(near[i] - near[j]))
            if abs(d) > math.radians(5.0):
                ambiguous = True
    note = "yaw ambiguous: near-tied optima differ by > 5 deg" if ambiguous else ""

    rot = (
        Rotation.about_z(yaw_best)
        * Rotation.about_y(0.0)
        * Rotation.about_x(cfg.roll_convention)
    )
    t_init = float(t0) if t0 is not None else min(m.t for m in usable)
    return InitResult(
        pose=Pose(t_init, p_best, rot),
        cost=cost_best,
        ambiguous=ambiguous,
        candidates=candidates,
        note=note,
    )


# ---------------------------------------------------------------------------
# streaming fusion
# ---------------------------------------------------------------------------

def predict_pose(prev_u_pose: Pose, prev_s_pose: Pose, new_s_pose: Pose) -> Pose:
    """Propagate the previous anchor-frame estimate by the SLAM increment."""
    return geometry.compose(prev_u_pose, geometry.relative(prev_s_pose, new_s_pose))


def gate_measurement(
    m,
    predicted_pose: Pose,
    anchors: dict,
    biases: LinkBias,
    extrinsics: TagExtrinsics,
    tau: float,
) -> bool:
    """Keep iff |corrected range - predicted range| <= tau at the predicted pose."""
    predicted = float(
        np.linalg.norm(predicted_pose.transform(extrinsics.offset(m.tag_id)) - anchors[m.anchor_id])
    )
    corrected = m.d + biases.get(m.tag_id, m.anchor_id)
    return abs(corrected - predicted) <= tau


@dataclass
class _WindowEntry:
    s_pose: Pose
    u_est: Pose
    confirmed: bool = False


@dataclass
class FusionState:
    anchors: dict
    biases: LinkBias
    extrinsics: TagExtrinsics
    entries: list = field(default_factory=list)           # active window
    interval_ranges: list = field(default_factory=list)   # per inter-pose interval
    confirmed: list = field(default_factory=list)         # committed U poses
    init_prior: tuple | None = None                       # (p0, rot0) gauge prior
    dropped: dict = field(
        default_factory=lambda: {"gated": 0, "unknown_link": 0, "unbracketed": 0}
    )


@dataclass
class WindowResult:
    report: solver.SolveReport
    wall_s: float
    n_poses: int
    n_ranges: int
    newly_confirmed: list


@dataclass
class WindowTiming:
    index: int
    t_end: float
    n_poses: int
    n_ranges: int
    wall_s: float
    iterations: int
    final_cost: float
    termination: str


@dataclass
class FusionOutput:
    trajectory: Trajectory
    timings: list
    init: InitResult
    dropped: dict


def _pose_block_values(pose: Pose) -> np.ndarray:
    return np.concatenate([pose.p, pose.r.quat])


def process_window(state: FusionState, cfg: FusionConfig, final: bool = False) -> WindowResult:
    """Solve the current window and commit poses that leave it.

    The head pose is held constant once confirmed; the very first window is
    anchored by a weak prior on the initialization pose instead. Commits
    `stride` poses (all remaining ones when final) and keeps the last
    committed pose as the new frozen head.
    """
    t_begin = time.perf_counter()
    entries = state.entries
    n = len(entries)
    if n < 2:
        raise WindowUnderflow(f"window holds {n} poses, needs >= 2")

    problem = solver.Problem()
    for k, ent in enumerate(entries):
        problem.add_block(
            solver.ParameterBlock(
                f"T{k}",
                solver.BlockKind.POSE,
                _pose_block_values(ent.u_est),
                constant=(k == 0 and ent.confirmed),
            )
        )

    sqrt_info = cfg.sqrt_info()
    for k in range(n - 1):
        delta = geometry.relative(entries[k].s_pose, entries[k + 1].s_pose)
        problem.add_residual(factors.relative_pose_block(f"T{k}", f"T{k+1}", delta, sqrt_info))

    if state.init_prior is not None and not entries[0].confirmed:
        p_ref, rot_ref = state.init_prior
        problem.add_residual(
            pose_prior_block(
                "T0", p_ref, rot_ref, cfg.init_pos_sigma, cfg.init_yaw_sigma, cfg.init_tilt_sigma
            )
        )

    n_ranges = 0
    for k in range(n - 1):
        ms = state.interval_ranges[k]
        if not ms:
            continue
        t_k = entries[k].s_pose.t
        dt = entries[k + 1].s_pose.t - t_k
        us = np.array([(m.t - t_k) / dt for m in ms])
        offs = np.array([state.extrinsics.offset(m.tag_id) for m in ms])
        pts = np.array([state.anchors[m.anchor_id] for m in ms])
        corr = np.array([m.d + state.biases.get(m.tag_id, m.anchor_id) for m in ms])
        problem.add_residual(
            interval_range_block(f"T{k}", f"T{k+1}", us, offs, pts, corr, cfg.cauchy_scale)
        )
        n_ranges += len(ms)

    report = solver.solve(problem, cfg.solve_options)

    for k, ent in enumerate(entries):
        v = problem.block(f"T{k}").values
        ent.u_est = Pose(ent.s_pose.t, v[:3].copy(), Rotation._from_unit(v[3:].copy()))

    # commit the poses leaving the window; keep the last committed as head
    first_free = 1 if entries[0].confirmed else 0
    n_commit = (n - first_free) if final else min(cfg.stride, n - first_free)
    newly = []
    for ent in entries[first_free : first_free + n_commit]:
        ent.confirmed = True
        state.confirmed.append(ent.u_est)
        newly.append(ent.u_est)
    if not final and n_commit > 0:
        keep_from = first_free + n_commit - 1
        state.entries = entries[keep_from:]
        state.interval_ranges = state.interval_ranges[keep_from:]
    if state.init_prior is not None and state.entries and state.entries[0].confirmed:
        state.init_prior = None  # gauge now carried by the frozen head

    wall = time.perf_counter() - t_begin
    return WindowResult(
        report=report, wall_s=wall, n_poses=n, n_ranges=n_ranges, newly_confirmed=newly
    )


def run_fusion(
    traj_s: Trajectory,
    ranges,
    calibration,
    extrinsics: TagExtrinsics,
    cfg: FusionConfig | None = None,
) -> FusionOutput:
    """Fuse a SLAM odometry stream with UWB ranges into the anchor frame.

    `calibration` provides `.anchors` and `.biases` (a CalibrationResult).
    Returns the confirmed trajectory in U plus per-window timing records.
    """
    cfg = cfg or FusionConfig()
    anchors = {str(a): np.asarray(p, dtype=float) for a, p in calibration.anchors.items()}
    biases = calibration.biases

    poses = list(traj_s)
    if len(poses) < 2:
        raise ValueError("fusion needs a trajectory of length >= 2")
    ranges = sorted(ranges, key=lambda m: m.t)

    t0 = poses[0].t
    stationary = [m for m in ranges if m.t <= t0 + cfg.stationary_s]
    init = initialize(stationary, anchors, biases, extrinsics, cfg, t0=t0)

    state = FusionState(anchors=anchors, biases=biases, extrinsics=extrinsics)
    state.entries = [_WindowEntry(s_pose=poses[0], u_est=init.pose)]
    state.init_prior = (init.pose.p.copy(), init.pose.r)

    timings = []
    ridx = 0
    n_ranges_total = len(ranges)
    while ridx < n_ranges_total and ranges[ridx].t < t0:
        state.dropped["unbracketed"] += 1
        ridx += 1

    for k in range(1, len(poses)):
        s_k = poses[k]
        last = state.entries[-1]
        pred = predict_pose(last.u_est, last.s_pose, s_k)

        kept = []
        while ridx < n_ranges_total and ranges[ridx].t <= s_k.t:
            m = ranges[ridx]
            ridx += 1
            if m.tag_id not in extrinsics or m.anchor_id not in anchors:
                state.dropped["unknown_link"] += 1
                continue
            pose_m = geometry.interpolate_between(last.u_est, pred, m.t)
            if gate_measurement(m, pose_m, anchors, biases, extrinsics, cfg.tau):
                kept.append(m)
            else:
                state.dropped["gated"] += 1

        state.entries.append(_WindowEntry(s_pose=s_k, u_est=pred))
        state.interval_ranges.append(kept)

        if len(state.entries) == cfg.window:
            result = process_window(state, cfg)
            timings.append(
                WindowTiming(
                    index=len(timings),
                    t_end=s_k.t,
                    n_poses=result.n_poses,
                    n_ranges=result.n_ranges,
                    wall_s=result.wall_s,
                    iterations=result.report.iterations,
                    final_cost=result.report.final_cost,
                    termination=result.report.termination,
                )
            )

    state.dropped["unbracketed"] += n_ranges_total - ridx

    if any(not e.confirmed for e in state.entries):
        if len(state.entries) >= 2:
            result = process_window(state, cfg, final=True)
            timings.append(
                WindowTiming(
                    index=len(timings),
                    t_end=state.entries[-1].s_pose.t,
                    n_poses=result.n_poses,
                    n_ranges=result.n_ranges,
                    wall_s=result.wall_s,
                    iterations=result.report.iterations,
                    final_cost=result.report.final_cost,
                    termination=result.report.termination,
                )
            )
        else:
            ent = state.entries[0]
            ent.confirmed = True
            state.confirmed.append(ent.u_est)

    return FusionOutput(
        trajectory=Trajectory(state.confirmed, frame="U"),
        timings=timings,
        init=init,
        dropped=dict(state.dropped),
    )
