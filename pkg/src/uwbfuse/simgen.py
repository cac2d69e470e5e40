"""Deterministic synthetic-scenario generator and oracle.

A scenario is an environment (anchors, per-link biases, tag offsets) plus one
run through it. The environment is derived from `seed` alone so several runs
(different `run_id`) share the same anchors and biases, mirroring a
calibration sequence followed by fusion sequences.

Measurement model: the stored per-link bias b is the value that corrects the
measurement, i.e. measured + b = true distance (+ noise + spike). This is the
same sign convention the range residual optimizes, so calibration on clean
data recovers exactly the stored biases. NLoS spikes are one-sided positive.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import dataio, geometry
from .errors import ConfigError
from .factors import AnchorHeightPrior, AnchorPairPrior, LinkBias, RangeMeasurement, TagExtrinsics
from .geometry import Pose, Rotation, Trajectory

__all__ = [
    "ScenarioConfig",
    "ScenarioTruth",
    "ConfusionMatrix",
    "generate",
    "label_report",
    "write_run",
]

TRAJECTORY_KINDS = ("figure8", "lawnmower", "random_waypoint")

# corner-ish anchor placements as volume fractions, at distinct heights
_ANCHOR_FRACTIONS = [
    (0.06, 0.06, 0.25),
    (0.94, 0.08, 0.50),
    (0.92, 0.92, 0.75),
    (0.08, 0.94, 0.95),
    (0.50, 0.06, 0.85),
    (0.06, 0.50, 0.35),
    (0.94, 0.50, 0.65),
    (0.50, 0.94, 0.15),
]


@dataclass
class ScenarioConfig:
    seed: int = 0
    run_id: int = 0
    volume: tuple = (20.0, 20.0, 10.0)        # box extents, meters
    n_anchors: int = 4
    anchor_positions: dict | None = None       # explicit {id: [x, y, z]} overrides
    tag_offsets: dict = field(
        default_factory=lambda: {"200": (0.4, 0.0, 0.0), "201": (-0.4, 0.0, 0.0)}
    )
    trajectory: str = "figure8"
    duration_s: float = 300.0
    odom_rate_hz: float = 10.0
    range_rate_hz: float = 65.0                # aggregate over all links
    range_noise_m: float = 0.05
    spike_prob: float = 0.05
    spike_min_m: float = 1.0
    spike_max_m: float = 10.0
    bias_abs_max_m: float = 0.2                # per-link bias ~ U(-max, max)
    link_biases: dict | None = None            # explicit {(tag, anchor): bias}
    drift_sigma_trans_m: float = 0.0           # odometry random walk, per step
    drift_sigma_rot_rad: float = 0.0
    stationary_s: float = 5.0
    speed_mps: float = 1.5
    max_yaw_rate_rps: float = 1.0
    roll_convention_rad: float = math.pi
    identity_frame: bool = False               # S frame coincides with U

    def validate(self) -> None:
        if self.odom_rate_hz <= 0 or self.range_rate_hz <= 0:
            raise ConfigError("rates must be positive")
        if not (0.0 <= self.spike_prob <= 1.0):
            raise ConfigError("spike probability must be in [0, 1]")
        if self.duration_s <= self.stationary_s:
            raise ConfigError("duration must exceed the stationary prefix")
        if self.trajectory not in TRAJECTORY_KINDS:
            raise ConfigError(f"unknown trajectory kind {self.trajectory!r}")
        if self.n_anchors < 1 and not self.anchor_positions:
            raise ConfigError("need at least one anchor")
        vol = np.asarray(self.volume, dtype=float)
        if vol.shape != (3,) or np.any(vol <= 0):
            raise ConfigError("volume must be three positive extents")
        if self.anchor_positions:
            for aid, p in self.anchor_positions.items():
                p = np.asarray(p, dtype=float)
                if np.any(p < 0.0) or np.any(p > vol):
                    raise ConfigError(f"anchor {aid!r} lies outside the volume")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["volume"] = list(self.volume)
        d["tag_offsets"] = {k: list(v) for k, v in self.tag_offsets.items()}
        if self.link_biases is not None:
            d["link_biases"] = {f"{t},{a}": v for (t, a), v in self.link_biases.items()}
        if self.anchor_positions is not None:
            d["anchor_positions"] = {k: list(v) for k, v in self.anchor_positions.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "volume" in d:
            d["volume"] = tuple(float(x) for x in d["volume"])
        if d.get("link_biases") is not None:
            d["link_biases"] = {
                tuple(k.split(",")): float(v) for k, v in d["link_biases"].items()
            }
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class ConfusionMatrix:
    """Spike-rejection counts: positive class = measurement rejected."""

    tp: int  # spike rejected
    fp: int  # clean rejected
    tn: int  # clean kept
    fn: int  # spike kept

    @property
    def spike_recall(self) -> float:
        n = self.tp + self.fn
        return self.tp / n if n else 1.0

    @property
    def clean_retention(self) -> float:
        n = self.tn + self.fp
        return self.tn / n if n else 1.0


@dataclass
class ScenarioTruth:
    """Ground truth used as oracle: everything the pipeline must recover."""

    config: ScenarioConfig
    traj_u: Trajectory                 # true trajectory in U
    anchors: dict                      # anchor_id -> (3,) in U
    biases: dict                       # (tag_id, anchor_id) -> meters
    ranges: list                       # RangeMeasurement, time-sorted
    labels: np.ndarray                 # 0 = clean, 1 = spike, aligned with ranges
    odom_s: Trajectory                 # drifted odometry in S
    s_from_u: Pose                     # sampled rigid transform S <- U
    extrinsics: TagExtrinsics

    def link_bias_table(self) -> LinkBias:
        return LinkBias(self.biases)


def _rotate_many(qs: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by quaternion rows qs (M, 4)."""
    u = qs[:, 1:]
    t = 2.0 * np.cross(u, v)
    return v + qs[:, 0:1] * t + np.cross(u, t)


def _figure8(cfg: ScenarioConfig, rng: np.random.Generator, tau: np.ndarray):
    vol = np.asarray(cfg.volume, dtype=float)
    center = vol * np.array([0.5, 0.5, 0.45])
    A, B, C = 0.35 * vol[0], 0.35 * vol[1], 0.25 * vol[2]
    omega = cfg.speed_mps / math.sqrt(A * A + B * B + (C / 3.0) ** 2)
    omega_z = omega / 3.0
    phase = rng.uniform(0.0, 2.0 * math.pi)
    th = omega * tau + phase
    x = center[0] + A * np.sin(th)
    y = center[1] + 0.5 * B * np.sin(2.0 * th)
    z = center[2] + C * np.sin(omega_z * tau + 0.5 * phase)
    yaw = np.arctan2(B * omega * np.cos(2.0 * th), A * omega * np.cos(th))
    return np.stack([x, y, z], axis=1), yaw


def _waypoint_path(cfg, rng, tau, waypoints):
    seg = np.diff(waypoints, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    keep = seg_len > 1e-9
    seg, seg_len = seg[keep], seg_len[keep]
    starts = waypoints[:-1][keep]
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.clip(cfg.speed_mps * tau, 0.0, cum[-1])
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[k]) / seg_len[k]
    pos = starts[k] + frac[:, None] * seg[k]
    bearing = np.arctan2(seg[k][:, 1], seg[k][:, 0])
    # slew-limit yaw so per-step rotation stays bounded at corners
    dt = float(tau[1] - tau[0]) if len(tau) > 1 else 0.1
    max_step = cfg.max_yaw_rate_rps * dt
    yaw = np.empty_like(bearing)
    yaw[0] = bearing[0]
    for i in range(1, len(yaw)):
        d = math.atan2(math.sin(bearing[i] - yaw[i - 1]), math.cos(bearing[i] - yaw[i - 1]))
        yaw[i] = yaw[i - 1] + np.clip(d, -max_step, max_step)
    return pos, yaw


def _lawnmower_waypoints(cfg: ScenarioConfig) -> np.ndarray:
    vol = np.asarray(cfg.volume, dtype=float)
    m = 0.15
    rows = np.linspace(m * vol[1], (1 - m) * vol[1], 5)
    x0, x1 = m * vol[0], (1 - m) * vol[0]
    z = 0.5 * vol[2]
    pts = []
    for j, y in enumerate(rows):
        if j % 2 == 0:
            pts += [(x0, y, z), (x1, y, z)]
        else:
            pts += [(x1, y, z), (x0, y, z)]
    fwd = np.array(pts, dtype=float)
    cycle = np.vstack([fwd, fwd[::-1][1:]])
    # tile the sweep until it covers the run length
    need = cfg.speed_mps * cfg.duration_s * 1.2
    one = float(np.sum(np.linalg.norm(np.diff(cycle, axis=0), axis=1)))
    reps = max(1, int(math.ceil(need / max(one, 1e-9))))
    out = [cycle]
    for _ in range(reps - 1):
        out.append(cycle[1:])
    return np.vstack(out)


def _random_waypoints(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    vol = np.asarray(cfg.volume, dtype=float)
    lo, hi = 0.1 * vol, 0.9 * vol
    need = cfg.speed_mps * cfg.duration_s * 1.2
    pts = [rng.uniform(lo, hi)]
    total = 0.0
    while total < need:
        nxt = rng.uniform(lo, hi)
        step = float(np.linalg.norm(nxt - pts[-1]))
        if step < 1.0:
            continue
        total += step
        pts.append(nxt)
    return np.array(pts)


def _true_trajectory(cfg: ScenarioConfig, rng: np.random.Generator) -> Trajectory:
    n = int(round(cfg.duration_s * cfg.odom_rate_hz)) + 1
    times = np.arange(n) / cfg.odom_rate_hz
    tau = np.clip(times - cfg.stationary_s, 0.0, None)
    if cfg.trajectory == "figure8":
        pos, yaw = _figure8(cfg, rng, tau)
    elif cfg.trajectory == "lawnmower":
        pos, yaw = _waypoint_path(cfg, rng, tau, _lawnmower_waypoints(cfg))
    else:
        pos, yaw = _waypoint_path(cfg, rng, tau, _random_waypoints(cfg, rng))
    roll = Rotation.about_x(cfg.roll_convention_rad)
    poses = [
        Pose(times[k], pos[k], Rotation.about_z(float(yaw[k])) * roll) for k in range(n)
    ]
    return Trajectory(poses, frame="U")


def _environment(cfg: ScenarioConfig, rng_env: np.random.Generator):
    vol = np.asarray(cfg.volume, dtype=float)
    if cfg.anchor_positions:
        anchors = {
            str(a): np.asarray(p, dtype=float).reshape(3)
            for a, p in cfg.anchor_positions.items()
        }
    else:
        anchors = {}
        for k in range(cfg.n_anchors):
            base = np.asarray(_ANCHOR_FRACTIONS[k % len(_ANCHOR_FRACTIONS)]) * vol
            jitter = rng_env.uniform(-0.3, 0.3, size=3)
            anchors[str(100 + k)] = np.clip(base + jitter, 0.0, vol)
    tags = {str(t): np.asarray(v, dtype=float) for t, v in cfg.tag_offsets.items()}
    links = [(t, a) for t in sorted(tags) for a in sorted(anchors)]
    if cfg.link_biases is not None:
        biases = {(str(t), str(a)): float(v) for (t, a), v in cfg.link_biases.items()}
        for link in links:
            biases.setdefault(link, 0.0)
    else:
        draws = rng_env.uniform(-cfg.bias_abs_max_m, cfg.bias_abs_max_m, size=len(links))
        biases = {link: float(b) for link, b in zip(links, draws)}
    return anchors, tags, biases, links


def generate(cfg: ScenarioConfig) -> ScenarioTruth:
    """Produce ground truth plus corrupted observations for one run.

    Deterministic per (seed, run_id): the environment streams only consume
    `seed`, so runs with different run_id share anchors and biases.
    """
    cfg.validate()
    rng_env = np.random.default_rng(np.random.SeedSequence([cfg.seed, 901]))
    rng_traj = np.random.default_rng(np.random.SeedSequence([cfg.seed, cfg.run_id, 1]))
    rng_noise = np.random.default_rng(np.random.SeedSequence([cfg.seed, cfg.run_id, 2]))
    rng_spike = np.random.default_rng(np.random.SeedSequence([cfg.seed, cfg.run_id, 3]))
    rng_drift = np.random.default_rng(np.random.SeedSequence([cfg.seed, cfg.run_id, 4]))
    rng_frame = np.random.default_rng(np.random.SeedSequence([cfg.seed, cfg.run_id, 5]))

    anchors, tags, biases, links = _environment(cfg, rng_env)
    traj_u = _true_trajectory(cfg, rng_traj)

    # ranges: round-robin over links at the aggregate rate
    m_total = int(cfg.duration_s * cfg.range_rate_hz)
    t_m = (np.arange(m_total) + 0.5) / cfg.range_rate_hz
    link_idx = np.arange(m_total) % len(links)
    ps, qs = traj_u.interpolate_many(t_m)

    anchor_arr = np.array([anchors[a] for (_, a) in links])
    offset_arr = np.array([tags[t] for (t, _) in links])
    bias_arr = np.array([biases[link] for link in links])

    sites = ps + _rotate_many(qs, offset_arr[link_idx])
    d_true = np.linalg.norm(sites - anchor_arr[link_idx], axis=1)

    noise = (
        rng_noise.normal(0.0, cfg.range_noise_m, size=m_total)
        if cfg.range_noise_m > 0
        else np.zeros(m_total)
    )
    spiked = rng_spike.random(m_total) < cfg.spike_prob
    mags = rng_spike.uniform(cfg.spike_min_m, cfg.spike_max_m, size=m_total)
    d_meas = d_true - bias_arr[link_idx] + noise + np.where(spiked, mags, 0.0)
    if np.any(d_meas <= 0.0):
        raise ConfigError("scene produces non-positive measured ranges")

    ranges = [
        RangeMeasurement(float(t_m[i]), links[link_idx[i]][0], links[link_idx[i]][1], float(d_meas[i]))
        for i in range(m_total)
    ]
    labels = spiked.astype(np.int8)

    # odometry: truth increments, right-perturbed, re-expressed in frame S
    if cfg.identity_frame:
        s_from_u = Pose.identity()
    else:
        yaw_s = rng_frame.uniform(-math.pi, math.pi)
        t_s = np.array(
            [rng_frame.uniform(-10, 10), rng_frame.uniform(-10, 10), rng_frame.uniform(-2, 2)]
        )
        s_from_u = Pose(0.0, t_s, Rotation.about_z(yaw_s))

    n = len(traj_u)
    eps_p = (
        rng_drift.normal(0.0, cfg.drift_sigma_trans_m, size=(n - 1, 3))
        if cfg.drift_sigma_trans_m > 0
        else np.zeros((n - 1, 3))
    )
    eps_r = (
        rng_drift.normal(0.0, cfg.drift_sigma_rot_rad, size=(n - 1, 3))
        if cfg.drift_sigma_rot_rad > 0
        else np.zeros((n - 1, 3))
    )

    odom = [geometry.compose(s_from_u, traj_u[0])]
    prev_true = traj_u[0]
    for k in range(n - 1):
        nxt_true = traj_u[k + 1]
        inc = geometry.relative(prev_true, nxt_true)
        noisy_inc = Pose(
            nxt_true.t, inc.p + eps_p[k], inc.r * Rotation.from_rotvec(eps_r[k])
        )
        odom.append(geometry.compose(odom[-1], noisy_inc))
        prev_true = nxt_true
    odom_s = Trajectory(odom, frame="S")

    return ScenarioTruth(
        config=cfg,
        traj_u=traj_u,
        anchors=anchors,
        biases=biases,
        ranges=ranges,
        labels=labels,
        odom_s=odom_s,
        s_from_u=s_from_u,
        extrinsics=TagExtrinsics(tags),
    )


def label_report(truth, kept) -> ConfusionMatrix:
    """Confusion matrix of spike rejection given per-measurement keep flags."""
    labels = truth.labels if isinstance(truth, ScenarioTruth) else np.asarray(truth)
    kept = np.asarray(kept, dtype=bool)
    if labels.shape[0] != kept.shape[0]:
        raise ValueError(
            f"decision length {kept.shape[0]} does not match {labels.shape[0]} measurements"
        )
    spike = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(spike & ~kept)),
        fp=int(np.sum(~spike & ~kept)),
        tn=int(np.sum(~spike & kept)),
        fn=int(np.sum(spike & kept)),
    )


def write_run(truth: ScenarioTruth, outdir) -> dict:
    """Write the run files dataio reads, plus the ground-truth sidecar.

    Layout: odom.txt, ranges.csv, extrinsics.json, pair_priors.json,
    height_priors.json, truth/traj_u.txt, truth/truth.json.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    truth_dir = outdir / "truth"
    truth_dir.mkdir(exist_ok=True)

    paths = {
        "odometry": outdir / "odom.txt",
        "ranges": outdir / "ranges.csv",
        "extrinsics": outdir / "extrinsics.json",
        "pair_priors": outdir / "pair_priors.json",
        "height_priors": outdir / "height_priors.json",
        "truth_trajectory": truth_dir / "traj_u.txt",
        "truth_meta": truth_dir / "truth.json",
    }
    dataio.write_trajectory(truth.odom_s, paths["odometry"])
    dataio.write_ranges(truth.ranges, paths["ranges"])
    dataio.write_extrinsics(truth.extrinsics, paths["extrinsics"])

    aids = sorted(truth.anchors)
    pairs = [
        AnchorPairPrior(a, b, float(np.linalg.norm(truth.anchors[a] - truth.anchors[b])))
        for i, a in enumerate(aids)
        for b in aids[i + 1 :]
    ]
    dataio.write_pair_priors(pairs, paths["pair_priors"])
    heights = [AnchorHeightPrior(a, float(truth.anchors[a][2]), 0.1) for a in aids]
    dataio.write_height_priors(heights, paths["height_priors"])

    dataio.write_trajectory(truth.traj_u, paths["truth_trajectory"])
    meta = {
        "anchors": {a: truth.anchors[a].tolist() for a in aids},
        "biases": {f"{t},{a}": v for (t, a), v in sorted(truth.biases.items())},
        "labels": truth.labels.tolist(),
        "s_from_u": {
            "p": truth.s_from_u.p.tolist(),
            "q_wxyz": truth.s_from_u.r.quat.tolist(),
        },
        "config": truth.config.to_dict(),
    }
    dataio.atomic_write_text(paths["truth_meta"], json.dumps(meta, indent=1, sort_keys=True))
    return {k: str(v) for k, v in paths.items()}
