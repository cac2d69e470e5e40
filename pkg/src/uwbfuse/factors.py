"""Residual definitions shared by calibration and fusion.

Sign convention for ranges: the residual is e = predicted - (measured + bias),
so the bias-corrected measurement is d + b everywhere (filter gates included).

All pose Jacobians follow the solver's tangent convention: right-multiplicative
rotation increment then additive translation, columns ordered [rotation (3),
translation (3)].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import geometry, solver
from .errors import DegenerateGeometry
from .geometry import Pose

__all__ = [
    "RangeMeasurement",
    "TagExtrinsics",
    "AnchorPairPrior",
    "AnchorHeightPrior",
    "LinkBias",
    "range_residual",
    "anchor_anchor_residual",
    "anchor_height_residual",
    "relative_pose_residual",
    "init_residual",
    "tag_range_block",
    "anchor_pair_block",
    "anchor_height_block",
    "relative_pose_block",
]

_MIN_RANGE_NORM = 1e-9  # below this the Jacobian of the norm is undefined


@dataclass(frozen=True)
class RangeMeasurement:
    """One two-way range between tag `tag_id` and anchor `anchor_id`."""

    t: float          # seconds
    tag_id: str
    anchor_id: str
    d: float          # meters

    def __post_init__(self):
        if not (math.isfinite(self.d) and self.d > 0.0):
            raise ValueError(f"range must be positive and finite, got {self.d!r}")
        if not math.isfinite(self.t):
            raise ValueError("non-finite measurement time")


class TagExtrinsics:
    """Body-frame offsets of the UWB tags (meters)."""

    def __init__(self, offsets: Mapping[str, Sequence[float]]):
        self._offsets = {
            str(tag): np.array(v, dtype=float).reshape(3) for tag, v in offsets.items()
        }
        for tag, v in self._offsets.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite offset for tag {tag!r}")
            v.flags.writeable = False

    def offset(self, tag_id: str) -> np.ndarray:
        try:
            return self._offsets[tag_id]
        except KeyError:
            raise KeyError(f"no extrinsics entry for tag {tag_id!r}") from None

    def __contains__(self, tag_id: str) -> bool:
        return tag_id in self._offsets

    @property
    def tags(self) -> list:
        return sorted(self._offsets)

    def as_dict(self) -> dict:
        return {tag: self._offsets[tag].tolist() for tag in self.tags}


@dataclass(frozen=True)
class AnchorPairPrior:
    """Known distance between two anchors (meters)."""

    a: str
    b: str
    distance: float

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("anchor pair prior needs two distinct anchors")
        if not (math.isfinite(self.distance) and self.distance > 0.0):
            raise ValueError("pair distance must be positive and finite")


@dataclass(frozen=True)
class AnchorHeightPrior:
    """Prior on an anchor's z coordinate, with standard deviation sigma."""

    anchor: str
    height: float
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0.0):
            raise ValueError("height prior sigma must be positive")


class LinkBias:
    """Per (tag, anchor) additive range bias table; unseen links default to 0."""

    def __init__(self, entries: Mapping[tuple, float] | None = None):
        self._b: dict = {}
        if entries:
            for (tag, anchor), v in entries.items():
                self.set(tag, anchor, v)

    def get(self, tag_id: str, anchor_id: str) -> float:
        return self._b.get((tag_id, anchor_id), 0.0)

    def set(self, tag_id: str, anchor_id: str, value: float) -> None:
        self._b[(str(tag_id), str(anchor_id))] = float(value)

    def __contains__(self, link: tuple) -> bool:
        return link in self._b

    def __len__(self) -> int:
        return len(self._b)

    def items(self):
        return sorted(self._b.items())

    def as_nested_dict(self) -> dict:
        out: dict = {}
        for (tag, anchor), v in self.items():
            out.setdefault(tag, {})[anchor] = v
        return out


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------

def range_residual(
    pose: Pose,
    tag_offset: Sequence[float],
    anchor: Sequence[float],
    bias: float,
    d: float,
    want_jacobians: bool = False,
):
    """e = ||p + R l - P|| - (d + b) for one tag/anchor range.

    Jacobians (when requested): {"pose": (1, 6), "anchor": (1, 3), "bias": (1, 1)}.
    Raises DegenerateGeometry when the tag coincides with the anchor.
    """
    l = np.asarray(tag_offset, dtype=float)
    P = np.asarray(anchor, dtype=float)
    R = pose.r.as_matrix()
    v = pose.p + R @ l - P
    n = float(np.linalg.norm(v))
    if n <= _MIN_RANGE_NORM:
        raise DegenerateGeometry("tag coincides with anchor; range Jacobian undefined")
    e = n - (float(d) + float(bias))
    if not want_jacobians:
        return e, None
    u = v / n
    J_pose = np.empty((1, 6))
    J_pose[0, 0:3] = -(u @ R) @ geometry.skew(l)
    J_pose[0, 3:6] = u
    return e, {"pose": J_pose, "anchor": -u[None, :], "bias": np.array([[-1.0]])}


def anchor_anchor_residual(
    pa: Sequence[float],
    pb: Sequence[float],
    distance: float,
    want_jacobians: bool = False,
):
    """e = ||Pa - Pb|| - d_ab; symmetric in its arguments."""
    pa = np.asarray(pa, dtype=float)
    pb = np.asarray(pb, dtype=float)
    v = pa - pb
    n = float(np.linalg.norm(v))
    if n <= _MIN_RANGE_NORM:
        raise DegenerateGeometry("coincident anchors; distance gradient singular")
    e = n - float(distance)
    if not want_jacobians:
        return e, None
    u = v / n
    return e, (u[None, :], -u[None, :])


def anchor_height_residual(
    pa: Sequence[float],
    height: float,
    sigma: float,
    want_jacobians: bool = False,
):
    """e = (Pa.z - h) / sigma testing the anchor against a height prior."""
    pa = np.asarray(pa, dtype=float)
    e = (float(pa[2]) - float(height)) / float(sigma)
    if not want_jacobians:
        return e, None
    return e, np.array([[0.0, 0.0, 1.0 / float(sigma)]])


def _relative_pose_core(pi, Ri, pj, Rj, dR, dp, scale, want_jac):
    E = dR.T @ Ri.T @ Rj
    er = geometry._quat_to_rotvec(geometry._matrix_to_quat(E))
    a = Ri.T @ (pj - pi)
    et = a - dp
    e = scale * np.concatenate([er, et])
    if not want_jac:
        return e, None
    Jrinv = geometry.right_jacobian_inv(er)
    B = Ri.T @ Rj
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    Ji[0:3, 0:3] = -Jrinv @ B.T
    Ji[3:6, 0:3] = geometry.skew(a)
    Ji[3:6, 3:6] = -Ri.T
    Jj[0:3, 0:3] = Jrinv
    Jj[3:6, 3:6] = Ri.T
    return e, (scale * Ji, scale * Jj)


def relative_pose_residual(
    ti_hat: Pose,
    tj_hat: Pose,
    delta_meas: Pose,
    scale: float = 1.0,
    want_jacobians: bool = False,
):
    """6-vector residual of the estimated increment against the measured one.

    e = s * [ log(dR^-1 Ri^T Rj)^vee ; Ri^T (pj - pi) - dp ]; zero exactly
    when Ti^-1 Tj equals the measured relative transform, and invariant to a
    common left-multiplied transform on both estimated poses.
    """
    return _relative_pose_core(
        ti_hat.p,
        ti_hat.r.as_matrix(),
        tj_hat.p,
        tj_hat.r.as_matrix(),
        delta_meas.r.as_matrix(),
        delta_meas.p,
        float(scale),
        want_jacobians,
    )


def _rot_z(psi: float) -> np.ndarray:
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_z_deriv(psi: float) -> np.ndarray:
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def init_residual(
    p0: Sequence[float],
    psi0: float,
    tag_offset: Sequence[float],
    anchor: Sequence[float],
    d: float,
    want_jacobians: bool = False,
):
    """Stationary-period residual e = ||Rz(psi) l + p0 - P|| - d.

    d must already be bias-corrected by the caller. Jacobians are returned
    as (J_p0 (1, 3), J_psi (1, 1)).
    """
    p0 = np.asarray(p0, dtype=float)
    l = np.asarray(tag_offset, dtype=float)
    P = np.asarray(anchor, dtype=float)
    Rz = _rot_z(float(psi0))
    v = Rz @ l + p0 - P
    n = float(np.linalg.norm(v))
    if n <= _MIN_RANGE_NORM:
        raise DegenerateGeometry("tag coincides with anchor; range Jacobian undefined")
    e = n - float(d)
    if not want_jacobians:
        return e, None
    u = v / n
    dpsi = float(u @ (_rot_z_deriv(float(psi0)) @ l))
    return e, (u[None, :], np.array([[dpsi]]))


# ---------------------------------------------------------------------------
# solver block builders
# ---------------------------------------------------------------------------

def tag_range_block(
    sites: np.ndarray,
    measured: np.ndarray,
    anchor_block: str,
    bias_block: str,
    cauchy_scale: float | None,
) -> solver.ResidualBlock:
    """Batched calibration range factor for one (tag, anchor) link.

    `sites` are the fixed world positions of the tag at each measurement time
    (the trajectory is constant during calibration), `measured` the raw
    ranges. Residual rows: ||site - P|| - (d + b); the loss applies per row.
    """
    sites = np.array(sites, dtype=float)
    measured = np.array(measured, dtype=float)
    m = sites.shape[0]

    def fn(values, want_jac, ctx):
        P, b = values
        v = sites - P[None, :]
        n = np.linalg.norm(v, axis=1)
        if np.any(n <= _MIN_RANGE_NORM):
            raise DegenerateGeometry("tag coincides with anchor; range Jacobian undefined")
        r = n - (measured + b[0])
        if not want_jac:
            return r, None
        u = v / n[:, None]
        return r, [-u, np.full((m, 1), -1.0)]

    return solver.ResidualBlock(
        dim=m,
        params=(anchor_block, bias_block),
        fn=fn,
        loss=cauchy_scale,
        elementwise=True,
    )


def anchor_pair_block(id_a: str, id_b: str, distance: float) -> solver.ResidualBlock:
    """Anchor-anchor distance constraint; trusted prior, no robust loss."""

    def fn(values, want_jac, ctx):
        e, jacs = anchor_anchor_residual(values[0], values[1], distance, want_jac)
        if not want_jac:
            return np.array([e]), None
        return np.array([e]), [jacs[0], jacs[1]]

    return solver.ResidualBlock(dim=1, params=(id_a, id_b), fn=fn)


def anchor_height_block(anchor_block: str, prior: AnchorHeightPrior) -> solver.ResidualBlock:
    def fn(values, want_jac, ctx):
        e, jac = anchor_height_residual(values[0], prior.height, prior.sigma, want_jac)
        if not want_jac:
            return np.array([e]), None
        return np.array([e]), [jac]

    return solver.ResidualBlock(dim=1, params=(anchor_block,), fn=fn)


def relative_pose_block(
    id_i: str,
    id_j: str,
    delta_meas: Pose,
    sqrt_info: np.ndarray,
) -> solver.ResidualBlock:
    """Relative-pose factor between two pose blocks, weighted by the
    square-root information diagonal (rotation triplet first)."""
    dR = delta_meas.r.as_matrix()
    dp = np.array(delta_meas.p, dtype=float)

    def fn(values, want_jac, ctx):
        vi, vj = values
        Ri = geometry._quat_to_matrix(vi[3:])
        Rj = geometry._quat_to_matrix(vj[3:])
        e, jacs = _relative_pose_core(vi[:3], Ri, vj[:3], Rj, dR, dp, 1.0, want_jac)
        if not want_jac:
            return e, None
        return e, [jacs[0], jacs[1]]

    return solver.ResidualBlock(
        dim=6,
        params=(id_i, id_j),
        fn=fn,
        sqrt_weight=np.asarray(sqrt_info, dtype=float),
    )
