"""File formats, ingestion/validation, and trajectory-error evaluation.

Formats (all plain text, written atomically, floats via repr so values
round-trip bit-exactly):

- trajectory: one pose per line `t x y z qx qy qz qw`, '#' comments; a
  `# frame: X` header records the frame label.
- ranges: CSV with header `t,tag_id,anchor_id,range_m`.
- extrinsics / pair priors / height priors / calibration: JSON documents;
  the calibration document is versioned.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .apc import CalibrationResult, LinkStats
from .errors import (
    DuplicateTimestamp,
    NoOverlap,
    ParseError,
    TooFewPairs,
    VersionMismatch,
)
from .factors import AnchorHeightPrior, AnchorPairPrior, LinkBias, RangeMeasurement, TagExtrinsics
from .geometry import Pose, Rotation, Trajectory
from .solver import SolveReport

__all__ = [
    "RunBundle",
    "LoadedRun",
    "AteReport",
    "parse_trajectory",
    "write_trajectory",
    "parse_ranges",
    "write_ranges",
    "parse_extrinsics",
    "write_extrinsics",
    "parse_pair_priors",
    "write_pair_priors",
    "parse_height_priors",
    "write_height_priors",
    "parse_calibration",
    "write_calibration",
    "ate",
    "load_bundle",
    "atomic_write_text",
]

log = logging.getLogger(__name__)

CALIBRATION_FORMAT_VERSION = 1
_ATE_ASSOC_WINDOW_S = 0.020  # nearest-timestamp association window


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file plus rename so readers never see partial output."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# trajectory files
# ---------------------------------------------------------------------------

def parse_trajectory(path, frame: str | None = None) -> Trajectory:
    """Read `t x y z qx qy qz qw` lines into a validated Trajectory.

    Quaternions must be within 1e-3 of unit norm (then renormalized); rows
    are stably sorted by time and duplicate timestamps rejected.
    """
    path = Path(path)
    rows = []
    frame_label = frame
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                body = s[1:].strip()
                if frame_label is None and body.lower().startswith("frame:"):
                    frame_label = body.split(":", 1)[1].strip()
                continue
            parts = s.split()
            if len(parts) != 8:
                raise ParseError(path, lineno, f"expected 8 fields, got {len(parts)}")
            try:
                vals = [float(x) for x in parts]
            except ValueError as exc:
                raise ParseError(path, lineno, f"non-numeric field: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(path, lineno, "non-finite value")
            t, x, y, z, qx, qy, qz, qw = vals
            qnorm = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
            if abs(qnorm - 1.0) > 1e-3:
                raise ParseError(path, lineno, f"quaternion norm {qnorm:.6f} not within 1e-3 of 1")
            rows.append((t, (x, y, z), (qw, qx, qy, qz), lineno))
    if not rows:
        raise ParseError(path, None, "no poses in file")
    rows.sort(key=lambda r: r[0])
    for a, b in zip(rows, rows[1:]):
        if b[0] == a[0]:
            raise DuplicateTimestamp(path, b[3], f"duplicate timestamp {b[0]!r}")
    poses = [Pose(t, p, Rotation.from_quat(q)) for t, p, q, _ in rows]
    return Trajectory(poses, frame=frame_label or "S")


def write_trajectory(traj: Trajectory, path) -> None:
    buf = io.StringIO()
    buf.write("# t x y z qx qy qz qw\n")
    buf.write(f"# frame: {traj.frame}\n")
    for pose in traj:
        w, x, y, z = pose.r.quat
        px, py, pz = pose.p
        buf.write(
            f"{pose.t!r} {px!r} {py!r} {pz!r} {x!r} {y!r} {z!r} {w!r}\n"
        )
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# range files
# ---------------------------------------------------------------------------

_RANGES_HEADER = ["t", "tag_id", "anchor_id", "range_m"]


def parse_ranges(path) -> tuple[list, int]:
    """Read the ranges CSV; returns (measurements sorted by time, skipped).

    Rows with non-positive or non-finite ranges are skipped with a warning
    and counted; structurally malformed rows raise ParseError.
    """
    path = Path(path)
    out = []
    skipped = 0
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        if [h.strip() for h in header] != _RANGES_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(_RANGES_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(path, lineno, f"expected 4 fields, got {len(row)}")
            try:
                t = float(row[0])
                d = float(row[3])
            except ValueError as exc:
                raise ParseError(path, lineno, f"non-numeric field: {exc}") from None
            tag, anchor = row[1].strip(), row[2].strip()
            if not tag or not anchor:
                raise ParseError(path, lineno, "empty tag or anchor id")
            if not math.isfinite(t):
                raise ParseError(path, lineno, "non-finite timestamp")
            if not math.isfinite(d) or d <= 0.0:
                skipped += 1
                continue
            out.append(RangeMeasurement(t, tag, anchor, d))
    if skipped:
        log.warning("%s: skipped %d rows with non-positive or non-finite ranges", path, skipped)
    out.sort(key=lambda m: m.t)
    return out, skipped


def write_ranges(measurements, path) -> None:
    buf = io.StringIO()
    buf.write(",".join(_RANGES_HEADER) + "\n")
    for m in measurements:
        buf.write(f"{m.t!r},{m.tag_id},{m.anchor_id},{m.d!r}\n")
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# JSON side files
# ---------------------------------------------------------------------------

def _load_json(path) -> dict:
    path = Path(path)
    try:
        with open(path, "r") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None


def parse_extrinsics(path) -> TagExtrinsics:
    doc = _load_json(path)
    if "tags" not in doc or not isinstance(doc["tags"], dict):
        raise ParseError(path, None, "missing 'tags' mapping")
    return TagExtrinsics(doc["tags"])


def write_extrinsics(extrinsics: TagExtrinsics, path) -> None:
    atomic_write_text(path, json.dumps({"tags": extrinsics.as_dict()}, indent=1, sort_keys=True))


def parse_pair_priors(path) -> list:
    doc = _load_json(path)
    if "pairs" not in doc:
        raise ParseError(path, None, "missing 'pairs' list")
    out = []
    for i, entry in enumerate(doc["pairs"]):
        try:
            out.append(
                AnchorPairPrior(str(entry["a"]), str(entry["b"]), float(entry["distance"]))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, None, f"bad pair prior #{i}: {exc}") from None
    return out


def write_pair_priors(priors, path) -> None:
    doc = {"pairs": [{"a": p.a, "b": p.b, "distance": p.distance} for p in priors]}
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True))


def parse_height_priors(path) -> list:
    doc = _load_json(path)
    if "heights" not in doc:
        raise ParseError(path, None, "missing 'heights' list")
    out = []
    for i, entry in enumerate(doc["heights"]):
        try:
            out.append(
                AnchorHeightPrior(str(entry["anchor"]), float(entry["height"]), float(entry["sigma"]))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, None, f"bad height prior #{i}: {exc}") from None
    return out


def write_height_priors(priors, path) -> None:
    doc = {
        "heights": [
            {"anchor": p.anchor, "height": p.height, "sigma": p.sigma} for p in priors
        ]
    }
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# calibration document
# ---------------------------------------------------------------------------

def write_calibration(result: CalibrationResult, path) -> None:
    doc = {
        "format_version": CALIBRATION_FORMAT_VERSION,
        "frame": "U",
        "anchors": {a: np.asarray(p).tolist() for a, p in sorted(result.anchors.items())},
        "biases": result.biases.as_nested_dict(),
        "link_stats": {
            f"{tag},{anchor}": {
                "raw_count": s.raw_count,
                "inlier_count": s.inlier_count,
                "rejected_count": s.rejected_count,
                "residual_rms": s.residual_rms,
                "bias_estimated": s.bias_estimated,
            }
            for (tag, anchor), s in sorted(result.link_stats.items())
        },
        "stage_reports": [r.as_dict() for r in result.stage_reports],
        "config": result.config,
        "warnings": list(result.warnings),
    }
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True))


def parse_calibration(path) -> CalibrationResult:
    """Exact inverse of write_calibration.

    Anchors without any bias entry get bias 0 with a warning; an unsupported
    format_version raises VersionMismatch.
    """
    doc = _load_json(path)
    version = doc.get("format_version")
    if version != CALIBRATION_FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: format_version {version!r}, supported {CALIBRATION_FORMAT_VERSION}"
        )
    if "anchors" not in doc or not isinstance(doc["anchors"], dict):
        raise ParseError(path, None, "missing 'anchors' mapping")
    anchors = {
        str(a): np.array(p, dtype=float).reshape(3) for a, p in doc["anchors"].items()
    }

    biases = LinkBias()
    covered = set()
    for tag, per_anchor in doc.get("biases", {}).items():
        for anchor, b in per_anchor.items():
            biases.set(str(tag), str(anchor), float(b))
            covered.add(str(anchor))
    for a in sorted(set(anchors) - covered):
        log.warning("%s: anchor %s has no bias entries; defaulting to 0", path, a)

    stats = {}
    for key, s in doc.get("link_stats", {}).items():
        tag, anchor = key.split(",", 1)
        stats[(tag, anchor)] = LinkStats(
            raw_count=int(s["raw_count"]),
            inlier_count=int(s["inlier_count"]),
            rejected_count=int(s["rejected_count"]),
            residual_rms=float(s["residual_rms"]),
            bias_estimated=bool(s["bias_estimated"]),
        )
    reports = [
        SolveReport(
            iterations=int(r["iterations"]),
            initial_cost=float(r["initial_cost"]),
            final_cost=float(r["final_cost"]),
            termination=str(r["termination"]),
            cost_trace=[float(c) for c in r["cost_trace"]],
        )
        for r in doc.get("stage_reports", [])
    ]
    return CalibrationResult(
        anchors=anchors,
        biases=biases,
        link_stats=stats,
        stage_reports=reports,
        config=doc.get("config", {}),
        warnings=list(doc.get("warnings", [])),
    )


# ---------------------------------------------------------------------------
# run bundles
# ---------------------------------------------------------------------------

@dataclass
class RunBundle:
    """Paths of one run's input files (a directory convention)."""

    trajectory: Path
    ranges: Path
    extrinsics: Path
    pair_priors: Path | None = None
    height_priors: Path | None = None


@dataclass
class LoadedRun:
    trajectory: Trajectory
    ranges: list
    skipped_ranges: int
    extrinsics: TagExtrinsics
    pair_priors: list
    height_priors: list


def load_bundle(directory) -> RunBundle:
    d = Path(directory)
    bundle = RunBundle(
        trajectory=d / "odom.txt",
        ranges=d / "ranges.csv",
        extrinsics=d / "extrinsics.json",
        pair_priors=(d / "pair_priors.json") if (d / "pair_priors.json").exists() else None,
        height_priors=(d / "height_priors.json") if (d / "height_priors.json").exists() else None,
    )
    for name in ("trajectory", "ranges", "extrinsics"):
        p = getattr(bundle, name)
        if not p.exists():
            raise FileNotFoundError(f"bundle is missing {name} file: {p}")
    return bundle


def load_run(bundle: RunBundle) -> LoadedRun:
    traj = parse_trajectory(bundle.trajectory)
    ranges, skipped = parse_ranges(bundle.ranges)
    extrinsics = parse_extrinsics(bundle.extrinsics)
    pairs = parse_pair_priors(bundle.pair_priors) if bundle.pair_priors else []
    heights = parse_height_priors(bundle.height_priors) if bundle.height_priors else []
    return LoadedRun(traj, ranges, skipped, extrinsics, pairs, heights)


# ---------------------------------------------------------------------------
# absolute trajectory error
# ---------------------------------------------------------------------------

@dataclass
class AteReport:
    rmse: float
    mean: float
    median: float
    max: float
    mode: str                  # "none" | "rigid"
    n_pairs: int
    times: np.ndarray          # association times (est side)
    errors: np.ndarray         # per-pair positional error, meters


def _associate(est: Trajectory, gt: Trajectory) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    et = est.times
    gtt = gt.times
    if et[-1] < gtt[0] or gtt[-1] < et[0]:
        raise NoOverlap("trajectories do not overlap in time")
    idx = np.searchsorted(gtt, et)
    lo = np.clip(idx - 1, 0, len(gtt) - 1)
    hi = np.clip(idx, 0, len(gtt) - 1)
    pick = np.where(np.abs(gtt[hi] - et) < np.abs(gtt[lo] - et), hi, lo)
    ok = np.abs(gtt[pick] - et) <= _ATE_ASSOC_WINDOW_S
    return np.nonzero(ok)[0], pick[ok], et[ok]


def _rigid_align(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form least-squares rotation/translation taking src onto dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        S[2, 2] = -1.0
    R = Vt.T @ S @ U.T
    t = mu_d - R @ mu_s
    return R, t


def ate(est: Trajectory, gt: Trajectory, mode: str = "none") -> AteReport:
    """Absolute trajectory error between est and gt.

    Pairs are associated by nearest timestamp within 20 ms, unmatched poses
    skipped. mode "none" compares positions directly (for outputs already in
    the anchor frame); mode "rigid" first applies the closed-form
    least-squares rigid alignment (for odometry in an arbitrary frame).
    """
    if mode not in ("none", "rigid"):
        raise ValueError(f"unknown ATE mode {mode!r}")
    ei, gi, times = _associate(est, gt)
    if len(ei) < 10:
        raise TooFewPairs(f"only {len(ei)} associated pose pairs (< 10)")
    pe = est.positions[ei]
    pg = gt.positions[gi]
    if mode == "rigid":
        R, t = _rigid_align(pe, pg)
        pe = pe @ R.T + t
    errors = np.linalg.norm(pe - pg, axis=1)
    return AteReport(
        rmse=float(np.sqrt(np.mean(errors**2))),
        mean=float(np.mean(errors)),
        median=float(np.median(errors)),
        max=float(np.max(errors)),
        mode=mode,
        n_pairs=int(len(errors)),
        times=times,
        errors=errors,
    )
