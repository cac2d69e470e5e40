"""Two-stage anchor position calibration.

Stage 1 runs a robust solve over every in-span range measurement to get
provisional anchor positions and link biases. The distance-error gate then
discards measurements whose bias-corrected range deviates from the predicted
range by more than tau, and stage 2 re-solves the same cost on the survivors.

Anchors are expressed directly in the calibration run's SLAM frame (the
persistent frame U is defined to coincide with it), so the problem carries no
gauge freedom once the trajectory is fixed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import factors, geometry, solver
from .errors import ConfigError, InsufficientData, NoOverlap
from .factors import LinkBias, TagExtrinsics
from .geometry import Trajectory

__all__ = [
    "ApcConfig",
    "LinkStats",
    "CalibrationResult",
    "FilterOutcome",
    "calibrate",
    "filter_outliers",
    "init_anchor_guess",
]

log = logging.getLogger(__name__)

ANCHOR_INIT_STRATEGIES = ("trilaterate", "centroid", "file")

# deterministic symmetry-breaking directions for the centroid strategy
_CENTROID_DIRS = np.array(
    [
        (1, 0, 0),
        (0, 1, 0),
        (0, 0, 1),
        (0.7071067811865476, 0.7071067811865476, 0),
        (0.7071067811865476, 0, 0.7071067811865476),
        (0, 0.7071067811865476, 0.7071067811865476),
        (-1, 0, 0),
        (0, -1, 0),
    ],
    dtype=float,
)


@dataclass
class ApcConfig:
    tau: float = 0.5                      # distance-error gate, meters
    cauchy_scale: float = 1.0             # robust loss scale on range factors
    anchor_init: str = "trilaterate"      # "trilaterate" | "centroid" | "file"
    anchor_init_positions: dict | None = None
    include_height_priors: bool = False
    min_bias_measurements: int = 50       # links below this get bias fixed to 0
    min_anchor_measurements: int = 4
    iterative_refilter: bool = False      # extra filter/solve rounds (off: two stages)
    max_refilter_rounds: int = 5
    solve_options: solver.SolveOptions = field(
        default_factory=lambda: solver.SolveOptions(max_iters=100)
    )

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.anchor_init not in ANCHOR_INIT_STRATEGIES:
            raise ConfigError(f"unknown anchor init strategy {self.anchor_init!r}")
        if self.anchor_init == "file" and not self.anchor_init_positions:
            raise ConfigError("anchor_init 'file' needs anchor_init_positions")


@dataclass
class LinkStats:
    raw_count: int
    inlier_count: int
    rejected_count: int
    residual_rms: float
    bias_estimated: bool


@dataclass
class CalibrationResult:
    anchors: dict                      # anchor_id -> (3,) position in U, meters
    biases: LinkBias                   # per observed link; 0 where not estimated
    link_stats: dict                   # (tag_id, anchor_id) -> LinkStats
    stage_reports: list                # SolveReport per stage
    config: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


@dataclass
class FilterOutcome:
    """Exhaustive partition of the input measurements by the tau gate."""

    inliers: list                      # kept RangeMeasurement, input order
    rejected: list                     # (RangeMeasurement, reason) pairs
    kept_mask: np.ndarray              # bool, aligned with the input order
    deviation: np.ndarray              # corrected - predicted; NaN out of span


def _tag_sites(traj: Trajectory, measurements, extrinsics: TagExtrinsics) -> np.ndarray:
    """World position of the measuring tag at each measurement time (M, 3)."""
    ts = np.array([m.t for m in measurements], dtype=float)
    sites = np.empty((len(measurements), 3))
    if not len(measurements):
        return sites
    ps, qs = traj.interpolate_many(ts)
    tag_ids = np.array([m.tag_id for m in measurements])
    for tag in np.unique(tag_ids):
        sel = tag_ids == tag
        offset = extrinsics.offset(str(tag))
        u = qs[sel, 1:]
        t2 = 2.0 * np.cross(u, offset)
        sites[sel] = ps[sel] + offset + qs[sel, 0:1] * t2 + np.cross(u, t2)
    return sites


def init_anchor_guess(
    strategy: str,
    traj: Trajectory,
    ranges,
    extrinsics: TagExtrinsics,
    positions: dict | None = None,
) -> dict:
    """Initial anchor positions for stage 1.

    trilaterate: closed-form linear multilateration from 20 evenly spaced
    measurements per anchor, bias ignored; falls back to the centroid guess
    per anchor when the linear system is ill-conditioned. centroid: trajectory
    centroid plus a small deterministic per-anchor offset to break symmetry.
    file: positions supplied by the caller.
    """
    measurements = [m for m in ranges if traj.start_time <= m.t <= traj.end_time]
    anchor_ids = sorted({m.anchor_id for m in measurements})
    if strategy == "file":
        if not positions:
            raise ConfigError("anchor init strategy 'file' needs positions")
        missing = [a for a in anchor_ids if a not in positions]
        if missing:
            raise ConfigError(f"init positions missing anchors {missing}")
        return {a: np.asarray(positions[a], dtype=float).reshape(3) for a in anchor_ids}

    centroid = traj.positions.mean(axis=0)
    guesses = {}
    for k, aid in enumerate(anchor_ids):
        scale = 1.0 + (k // len(_CENTROID_DIRS))
        guesses[aid] = centroid + scale * _CENTROID_DIRS[k % len(_CENTROID_DIRS)]
    if strategy == "centroid":
        return guesses

    sites = _tag_sites(traj, measurements, extrinsics)
    for aid in anchor_ids:
        idx = np.array([i for i, m in enumerate(measurements) if m.anchor_id == aid])
        pick = np.unique(np.linspace(0, len(idx) - 1, 20).round().astype(int))
        s = sites[idx[pick]]
        d = np.array([measurements[i].d for i in idx[pick]])
        # ||s - P|| = d  ->  2 s.P - ||P||^2 = ||s||^2 - d^2, linear in [P; k]
        A = np.hstack([2.0 * s, -np.ones((len(s), 1))])
        b = np.sum(s * s, axis=1) - d * d
        sol, _, rank, sv = np.linalg.lstsq(A, b, rcond=None)
        ill = rank < 4 or sv[-1] <= 0 or (sv[0] / sv[-1]) > 1e8
        if ill or not np.all(np.isfinite(sol)):
            log.warning("trilateration ill-conditioned for anchor %s; centroid fallback", aid)
            continue
        guesses[aid] = sol[:3]
    return guesses


def filter_outliers(
    ranges,
    anchors0: dict,
    biases: LinkBias,
    traj: Trajectory,
    tau: float,
    extrinsics: TagExtrinsics,
) -> FilterOutcome:
    """Gate each measurement on |corrected - predicted| <= tau.

    corrected = d + b (the sign convention the residual optimizes); predicted
    uses the interpolated pose and the provisional anchors. Measurements
    outside the trajectory span are rejected with reason "out_of_span".
    """
    ranges = list(ranges)
    n = len(ranges)
    kept = np.zeros(n, dtype=bool)
    deviation = np.full(n, np.nan)
    rejected = []
    ts = np.array([m.t for m in ranges], dtype=float)
    in_span = traj.in_span_mask(ts) if n else np.zeros(0, dtype=bool)

    idx_in = np.nonzero(in_span)[0]
    if len(idx_in):
        subset = [ranges[i] for i in idx_in]
        for m in subset:
            if m.anchor_id not in anchors0:
                raise KeyError(f"provisional positions missing anchor {m.anchor_id!r}")
        sites = _tag_sites(traj, subset, extrinsics)
        anchor_arr = np.array([anchors0[m.anchor_id] for m in subset])
        predicted = np.linalg.norm(sites - anchor_arr, axis=1)
        corrected = np.array([m.d + biases.get(m.tag_id, m.anchor_id) for m in subset])
        dev = corrected - predicted
        deviation[idx_in] = dev
        kept[idx_in] = np.abs(dev) <= tau

    inliers = []
    for i, m in enumerate(ranges):
        if not in_span[i]:
            rejected.append((m, "out_of_span"))
        elif kept[i]:
            inliers.append(m)
        else:
            rejected.append((m, "outlier"))
    return FilterOutcome(inliers=inliers, rejected=rejected, kept_mask=kept, deviation=deviation)


def _solve_stage(
    measurements,
    sites: np.ndarray,
    anchors_init: dict,
    bias_init: LinkBias,
    estimated_links: set,
    pair_priors,
    height_priors,
    cfg: ApcConfig,
):
    problem = solver.Problem()
    anchor_ids = sorted(anchors_init)
    for aid in anchor_ids:
        problem.add_block(
            solver.ParameterBlock(f"A:{aid}", solver.BlockKind.POINT3, anchors_init[aid])
        )

    links = sorted({(m.tag_id, m.anchor_id) for m in measurements})
    link_rows = {link: [] for link in links}
    for i, m in enumerate(measurements):
        link_rows[(m.tag_id, m.anchor_id)].append(i)

    for tag, anchor in links:
        estimated = (tag, anchor) in estimated_links
        b0 = bias_init.get(tag, anchor) if estimated else 0.0
        problem.add_block(
            solver.ParameterBlock(
                f"b:{tag}:{anchor}", solver.BlockKind.SCALAR, [b0], constant=not estimated
            )
        )
        rows = np.array(link_rows[(tag, anchor)])
        problem.add_residual(
            factors.tag_range_block(
                sites[rows],
                np.array([measurements[i].d for i in rows]),
                f"A:{anchor}",
                f"b:{tag}:{anchor}",
                cfg.cauchy_scale,
            )
        )

    for prior in pair_priors:
        if prior.a in anchors_init and prior.b in anchors_init:
            problem.add_residual(factors.anchor_pair_block(f"A:{prior.a}", f"A:{prior.b}", prior.distance))
        else:
            log.warning("pair prior (%s, %s) references unobserved anchor; skipped", prior.a, prior.b)
    if cfg.include_height_priors:
        for prior in height_priors:
            if prior.anchor in anchors_init:
                problem.add_residual(factors.anchor_height_block(f"A:{prior.anchor}", prior))

    report = solver.solve(problem, cfg.solve_options)

    anchors = {aid: problem.block(f"A:{aid}").values.copy() for aid in anchor_ids}
    biases = LinkBias()
    for tag, anchor in links:
        biases.set(tag, anchor, float(problem.block(f"b:{tag}:{anchor}").values[0]))

    # per-link RMS of the final (unrobustified) residuals
    rms = {}
    for link in links:
        rows = np.array(link_rows[link])
        tag, anchor = link
        pred = np.linalg.norm(sites[rows] - anchors[anchor][None, :], axis=1)
        res = pred - np.array([measurements[i].d for i in rows]) - biases.get(tag, anchor)
        rms[link] = float(np.sqrt(np.mean(res * res)))
    return anchors, biases, report, rms


def calibrate(
    traj: Trajectory,
    ranges,
    extrinsics: TagExtrinsics,
    pair_priors=(),
    height_priors=(),
    cfg: ApcConfig | None = None,
) -> CalibrationResult:
    """Run the two-stage calibration and return anchors, biases, and stats.

    Raises NoOverlap when no measurement falls inside the trajectory span and
    InsufficientData when an observed anchor has fewer than the minimum
    usable measurements for a 3D fix.
    """
    cfg = cfg or ApcConfig()
    cfg.validate()
    if len(traj) < 2:
        raise ValueError("calibration needs a trajectory of length >= 2")

    raw = list(ranges)
    warnings: list = []
    ts = np.array([m.t for m in raw], dtype=float)
    in_span = traj.in_span_mask(ts) if raw else np.zeros(0, dtype=bool)
    usable = [m for m, ok in zip(raw, in_span) if ok]
    if not usable:
        raise NoOverlap("no range measurement falls inside the trajectory span")

    counts: dict = {}
    for m in usable:
        counts[m.anchor_id] = counts.get(m.anchor_id, 0) + 1
    for aid in sorted(counts):
        if counts[aid] < cfg.min_anchor_measurements:
            raise InsufficientData(aid, counts[aid], cfg.min_anchor_measurements)

    link_counts: dict = {}
    for m in usable:
        link_counts[(m.tag_id, m.anchor_id)] = link_counts.get((m.tag_id, m.anchor_id), 0) + 1
    estimated = {link for link, c in link_counts.items() if c >= cfg.min_bias_measurements}
    for link in sorted(set(link_counts) - estimated):
        msg = (
            f"link {link} has {link_counts[link]} measurements "
            f"(< {cfg.min_bias_measurements}); bias fixed to 0"
        )
        warnings.append(msg)
        log.warning(msg)

    sites = _tag_sites(traj, usable, extrinsics)
    anchors0 = init_anchor_guess(
        cfg.anchor_init, traj, usable, extrinsics, cfg.anchor_init_positions
    )

    anchors1, biases1, report1, _ = _solve_stage(
        usable, sites, anchors0, LinkBias(), estimated, pair_priors, height_priors, cfg
    )

    outcome = filter_outliers(raw, anchors1, biases1, traj, cfg.tau, extrinsics)
    reports = [report1]
    anchors_cur, biases_cur = anchors1, biases1

    rounds = cfg.max_refilter_rounds if cfg.iterative_refilter else 1
    rms: dict = {}
    estimated2: set = set()
    for _ in range(rounds):
        inliers = outcome.inliers
        if not inliers:
            raise NoOverlap("outlier gate rejected every measurement")
        inlier_counts: dict = {}
        for m in inliers:
            inlier_counts[(m.tag_id, m.anchor_id)] = inlier_counts.get((m.tag_id, m.anchor_id), 0) + 1
        estimated2 = {link for link, c in inlier_counts.items() if c >= cfg.min_bias_measurements}
        sites_in = _tag_sites(traj, inliers, extrinsics)
        anchors_new, biases_new, report, rms = _solve_stage(
            inliers, sites_in, anchors_cur, biases_cur, estimated2, pair_priors, height_priors, cfg
        )
        reports.append(report)
        if not cfg.iterative_refilter:
            anchors_cur, biases_cur = anchors_new, biases_new
            break
        moved = max(
            float(np.linalg.norm(anchors_new[a] - anchors_cur[a])) for a in anchors_new
        )
        anchors_cur, biases_cur = anchors_new, biases_new
        if moved < 1e-9:
            break
        outcome = filter_outliers(raw, anchors_cur, biases_cur, traj, cfg.tau, extrinsics)

    # per-link bookkeeping against the raw input
    raw_counts: dict = {}
    for m in raw:
        raw_counts[(m.tag_id, m.anchor_id)] = raw_counts.get((m.tag_id, m.anchor_id), 0) + 1
    final_inlier_counts: dict = {}
    for m in outcome.inliers:
        link = (m.tag_id, m.anchor_id)
        final_inlier_counts[link] = final_inlier_counts.get(link, 0) + 1
    stats = {}
    for link in sorted(raw_counts):
        n_raw = raw_counts[link]
        n_in = final_inlier_counts.get(link, 0)
        stats[link] = LinkStats(
            raw_count=n_raw,
            inlier_count=n_in,
            rejected_count=n_raw - n_in,
            residual_rms=rms.get(link, math.nan),
            bias_estimated=link in estimated2,
        )

    cfg_echo = {
        "tau": cfg.tau,
        "cauchy_scale": cfg.cauchy_scale,
        "anchor_init": cfg.anchor_init,
        "include_height_priors": cfg.include_height_priors,
        "min_bias_measurements": cfg.min_bias_measurements,
        "iterative_refilter": cfg.iterative_refilter,
    }
    return CalibrationResult(
        anchors={a: anchors_cur[a] for a in sorted(anchors_cur)},
        biases=biases_cur,
        link_stats=stats,
        stage_reports=reports,
        config=cfg_echo,
        warnings=warnings,
    )
