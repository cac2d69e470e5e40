"""Rotation / rigid-transform algebra and continuous-time pose interpolation.

Conventions used throughout the package:

- Quaternions are Hamilton, stored as (w, x, y, z), kept at unit norm and
  canonicalized to w >= 0 so the double cover collapses to one representative.
- A pose (p, r) maps body coordinates into its frame: x_frame = r * x_body + p.
- Tangent increments on poses are right-multiplicative on rotation and
  additive on translation, ordered [rotation; translation].
- Timestamps inside a trajectory are stored as float64 seconds relative to
  the first pose, which keeps interpolation weights well conditioned for
  epoch-style inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import OutOfRange

__all__ = [
    "Rotation",
    "Pose",
    "Trajectory",
    "slerp",
    "interpolate_pose",
    "interpolate_between",
    "so3_log_vee",
    "compose",
    "inverse",
    "relative",
    "skew",
    "rotvec_to_matrix",
    "right_jacobian",
    "right_jacobian_inv",
    "left_jacobian_inv",
]

_SLERP_LERP_DOT = 0.9999995  # above this, nlerp is exact to double precision


# ---------------------------------------------------------------------------
# raw quaternion helpers (w, x, y, z arrays); Rotation wraps these
# ---------------------------------------------------------------------------

def _qnormalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(q @ q))
    if not math.isfinite(n) or n < 1e-12:
        raise ValueError("quaternion norm is zero or non-finite")
    q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def _qmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _qconj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def _cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # np.cross carries heavy axis-handling overhead for single 3-vectors
    return np.array(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


def _qrotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    # v' = v + 2w (u x v) + 2 u x (u x v) with u the vector part
    u = q[1:]
    t = 2.0 * _cross3(u, v)
    return v + q[0] * t + _cross3(u, t)


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    # Shepperd's method: pick the largest pivot from the diagonal, which keeps
    # the extraction stable for rotations near 180 degrees.
    t = float(np.trace(m))
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return _qnormalize(q)


def _rotvec_to_quat(v: np.ndarray) -> np.ndarray:
    th = math.sqrt(float(v @ v))
    if th < 1e-7:
        # second-order series of cos(th/2), sin(th/2)/th
        w = 1.0 - th * th / 8.0
        xyz = (0.5 - th * th / 48.0) * v
    else:
        w = math.cos(0.5 * th)
        xyz = (math.sin(0.5 * th) / th) * v
    return _qnormalize(np.array([w, xyz[0], xyz[1], xyz[2]]))


def _quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    # Assumes canonical w >= 0, so the angle lands in [0, pi].
    w = q[0]
    u = q[1:]
    s = math.sqrt(float(u @ u))
    if s < 5e-7:  # rotation angle below ~1e-6 rad: first-order series
        return (2.0 / w) * u
    th = 2.0 * math.atan2(s, w)
    return (th / s) * u


def _slerp_many(q0: np.ndarray, q1: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorized shortest-arc slerp on (N, 4) quaternion rows with weights (N,)."""
    dot = np.sum(q0 * q1, axis=1)
    sign = np.where(dot < 0.0, -1.0, 1.0)
    q1 = q1 * sign[:, None]
    dot = np.clip(dot * sign, -1.0, 1.0)
    out = np.empty_like(q0)

    near = dot > _SLERP_LERP_DOT
    if np.any(near):
        mixed = q0[near] + u[near, None] * (q1[near] - q0[near])
        out[near] = mixed
    far = ~near
    if np.any(far):
        th0 = np.arccos(dot[far])
        s0 = np.sin(th0)
        a = np.sin((1.0 - u[far]) * th0) / s0
        b = np.sin(u[far] * th0) / s0
        out[far] = a[:, None] * q0[far] + b[:, None] * q1[far]

    out /= np.linalg.norm(out, axis=1, keepdims=True)
    out *= np.where(out[:, 0] < 0.0, -1.0, 1.0)[:, None]
    return out


# ---------------------------------------------------------------------------
# SO(3) matrix helpers used by factor Jacobians
# ---------------------------------------------------------------------------

_EYE3 = np.eye(3)
_EYE3.flags.writeable = False


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix [v]x such that [v]x @ w = v x w."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(v: np.ndarray) -> np.ndarray:
    """Rodrigues formula; series branch below 1e-7 rad."""
    v = np.asarray(v, dtype=float)
    th = math.sqrt(float(v @ v))
    K = skew(v)
    if th < 1e-7:
        return _EYE3 + K + 0.5 * (K @ K)
    K2 = K @ K
    return _EYE3 + (math.sin(th) / th) * K + ((1.0 - math.cos(th)) / (th * th)) * K2


def right_jacobian(v: np.ndarray) -> np.ndarray:
    """Right Jacobian of the SO(3) exponential at rotation vector v."""
    v = np.asarray(v, dtype=float)
    th = math.sqrt(float(v @ v))
    K = skew(v)
    K2 = K @ K
    if th < 1e-5:
        c1 = 0.5 - th * th / 24.0
        c2 = 1.0 / 6.0 - th * th / 120.0
    else:
        c1 = (1.0 - math.cos(th)) / (th * th)
        c2 = (th - math.sin(th)) / (th * th * th)
    return _EYE3 - c1 * K + c2 * K2


def right_jacobian_inv(v: np.ndarray) -> np.ndarray:
    """Inverse of the right Jacobian of the SO(3) exponential."""
    v = np.asarray(v, dtype=float)
    th = math.sqrt(float(v @ v))
    K = skew(v)
    K2 = K @ K
    if th < 1e-5:
        c = 1.0 / 12.0 + th * th / 720.0
    else:
        c = 1.0 / (th * th) - (1.0 + math.cos(th)) / (2.0 * th * math.sin(th))
    return _EYE3 + 0.5 * K + c * K2


def left_jacobian_inv(v: np.ndarray) -> np.ndarray:
    """Inverse of the left Jacobian; equals the right-Jacobian inverse at -v."""
    return right_jacobian_inv(-np.asarray(v, dtype=float))


# ---------------------------------------------------------------------------
# public types
# ---------------------------------------------------------------------------

class Rotation:
    """Unit quaternion (w, x, y, z), canonicalized to w >= 0 on construction."""

    __slots__ = ("_q",)

    def __init__(self, w: float, x: float, y: float, z: float):
        q = np.array([w, x, y, z], dtype=float)
        if not np.all(np.isfinite(q)):
            raise ValueError("non-finite quaternion components")
        q = _qnormalize(q)
        q.flags.writeable = False
        self._q = q

    @classmethod
    def _from_unit(cls, q: np.ndarray) -> "Rotation":
        # trusted path: q already normalized and canonical
        r = object.__new__(cls)
        q = np.asarray(q, dtype=float)
        q.flags.writeable = False
        r._q = q
        return r

    @classmethod
    def from_quat(cls, q: Sequence[float]) -> "Rotation":
        return cls(q[0], q[1], q[2], q[3])

    @classmethod
    def identity(cls) -> "Rotation":
        return cls._from_unit(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_rotvec(cls, v: Sequence[float]) -> "Rotation":
        return cls._from_unit(_rotvec_to_quat(np.asarray(v, dtype=float)))

    @classmethod
    def about_x(cls, angle: float) -> "Rotation":
        return cls.from_rotvec((angle, 0.0, 0.0))

    @classmethod
    def about_y(cls, angle: float) -> "Rotation":
        return cls.from_rotvec((0.0, angle, 0.0))

    @classmethod
    def about_z(cls, angle: float) -> "Rotation":
        return cls.from_rotvec((0.0, 0.0, angle))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Rotation":
        return cls._from_unit(_matrix_to_quat(np.asarray(m, dtype=float)))

    @property
    def quat(self) -> np.ndarray:
        """Read-only (w, x, y, z) view."""
        return self._q

    def as_matrix(self) -> np.ndarray:
        return _quat_to_matrix(self._q)

    def rotate(self, v: Sequence[float]) -> np.ndarray:
        return _qrotate(self._q, np.asarray(v, dtype=float))

    def __mul__(self, other: "Rotation") -> "Rotation":
        return Rotation._from_unit(_qnormalize(_qmul(self._q, other._q)))

    def inverse(self) -> "Rotation":
        return Rotation._from_unit(_qnormalize(_qconj(self._q)))

    def log(self) -> np.ndarray:
        """Axis-angle vector theta * axis with theta in [0, pi]."""
        return _quat_to_rotvec(self._q)

    def angle(self) -> float:
        return float(np.linalg.norm(self.log()))

    def angle_to(self, other: "Rotation") -> float:
        return (self.inverse() * other).angle()

    def yaw(self) -> float:
        """Heading about +z extracted from the first rotation-matrix column."""
        m = self.as_matrix()
        return math.atan2(m[1, 0], m[0, 0])

    def __repr__(self) -> str:
        w, x, y, z = self._q
        return f"Rotation(w={w:.6g}, x={x:.6g}, y={y:.6g}, z={z:.6g})"


def slerp(r0: Rotation, r1: Rotation, u: float) -> Rotation:
    """Geodesic interpolation between r0 and r1 along the shortest arc.

    The quaternion dot product is made non-negative before interpolating so
    the path never takes the long way around. u is expected in [0, 1].
    """
    out = _slerp_many(
        r0.quat[None, :], r1.quat[None, :], np.array([float(u)])
    )
    return Rotation._from_unit(out[0])


def so3_log_vee(r: Rotation) -> np.ndarray:
    """Vee-mapped matrix logarithm: axis-angle vector, theta in [0, pi]."""
    return r.log()


@dataclass(frozen=True)
class Pose:
    """Timestamped rigid transform of the body in a named frame.

    t: seconds; p: translation in meters; r: body-to-frame rotation.
    """

    t: float
    p: np.ndarray
    r: Rotation

    def __post_init__(self):
        p = np.array(self.p, dtype=float).reshape(3)
        if not (math.isfinite(self.t) and np.all(np.isfinite(p))):
            raise ValueError("non-finite pose coordinates")
        p.flags.writeable = False
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "t", float(self.t))

    @classmethod
    def identity(cls, t: float = 0.0) -> "Pose":
        return cls(t, np.zeros(3), Rotation.identity())

    def transform(self, v: Sequence[float]) -> np.ndarray:
        """Map a body-frame point into this pose's frame."""
        return self.p + self.r.rotate(v)


def compose(a: Pose, b: Pose) -> Pose:
    """Group composition a * b; the result keeps b's timestamp."""
    return Pose(b.t, a.p + a.r.rotate(b.p), a.r * b.r)


def inverse(a: Pose) -> Pose:
    rinv = a.r.inverse()
    return Pose(a.t, -rinv.rotate(a.p), rinv)


def relative(a: Pose, b: Pose) -> Pose:
    """Relative transform a^-1 * b (the increment taking a to b)."""
    return compose(inverse(a), b)


def interpolate_between(a: Pose, b: Pose, t_m: float) -> Pose:
    """Slerp/lerp between two poses at time t_m in [a.t, b.t]."""
    dt = b.t - a.t
    if dt <= 0.0:
        raise ValueError("poses must be strictly increasing in time")
    u = (t_m - a.t) / dt
    q = _slerp_many(a.r.quat[None, :], b.r.quat[None, :], np.array([u]))[0]
    p = (1.0 - u) * a.p + u * b.p
    return Pose(t_m, p, Rotation._from_unit(q))


class Trajectory:
    """Time-sorted pose sequence with interpolation queries.

    Timestamps must be strictly increasing; interpolation requires at least
    two poses and raises OutOfRange outside the covered span.
    """

    def __init__(self, poses: Iterable[Pose], frame: str = "S"):
        poses = list(poses)
        if not poses:
            raise ValueError("trajectory needs at least one pose")
        times = np.array([p.t for p in poses], dtype=float)
        if np.any(np.diff(times) <= 0.0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        self._t0 = float(times[0])
        self._tr = times - self._t0  # relative seconds, well-conditioned weights
        self._ps = np.array([p.p for p in poses], dtype=float)
        self._qs = np.array([p.r.quat for p in poses], dtype=float)
        self.frame = frame

    def __len__(self) -> int:
        return len(self._tr)

    def __getitem__(self, i: int) -> Pose:
        return Pose(self._t0 + self._tr[i], self._ps[i], Rotation._from_unit(self._qs[i]))

    def __iter__(self) -> Iterator[Pose]:
        for i in range(len(self)):
            yield self[i]

    @property
    def times(self) -> np.ndarray:
        return self._t0 + self._tr

    @property
    def positions(self) -> np.ndarray:
        return self._ps.copy()

    @property
    def start_time(self) -> float:
        return self._t0

    @property
    def end_time(self) -> float:
        return self._t0 + float(self._tr[-1])

    def in_span_mask(self, ts: np.ndarray) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        return (ts >= self.start_time) & (ts <= self.end_time)

    def interpolate(self, t_m: float) -> Pose:
        """Pose at t_m: translation lerped, rotation slerped between the
        bracketing poses found by binary search."""
        ps, qs = self.interpolate_many(np.array([t_m]))
        return Pose(t_m, ps[0], Rotation._from_unit(qs[0]))

    def interpolate_many(self, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized interpolation; all query times must be in span.

        Returns (positions (M, 3), quaternions (M, 4)).
        """
        if len(self) < 2:
            raise ValueError("interpolation needs a trajectory of length >= 2")
        ts = np.asarray(ts, dtype=float)
        tr = ts - self._t0
        if np.any((tr < self._tr[0]) | (tr > self._tr[-1])):
            bad = ts[(tr < self._tr[0]) | (tr > self._tr[-1])][0]
            raise OutOfRange(float(bad), (self.start_time, self.end_time))
        k = np.searchsorted(self._tr, tr, side="right") - 1
        k = np.clip(k, 0, len(self) - 2)
        dt = self._tr[k + 1] - self._tr[k]
        u = (tr - self._tr[k]) / dt
        ps = (1.0 - u)[:, None] * self._ps[k] + u[:, None] * self._ps[k + 1]
        qs = _slerp_many(self._qs[k], self._qs[k + 1], u)
        return ps, qs


def interpolate_pose(traj: Trajectory, t_m: float) -> Pose:
    """Free-function alias for Trajectory.interpolate."""
    return traj.interpolate(t_m)
