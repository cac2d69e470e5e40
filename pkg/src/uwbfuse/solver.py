"""In-house damped nonlinear least-squares over named parameter blocks.

The engine is a dense Levenberg-Marquardt iteration with adaptive damping
(multiplied / divided by 10 on rejected / accepted steps). Problems at the
scale handled here (a few dozen anchors+biases, or a ~50-pose window) are
small enough that dense normal equations beat any sparse machinery.

Cost model: each residual block contributes rho(||r||^2) to the total cost,
where r is the square-root-weighted residual vector and rho is the identity
when no robust loss is attached. Blocks flagged `elementwise` are stacks of
independent scalar residuals sharing parameter blocks; the loss is then
applied per element, which is how batched range factors keep per-measurement
robustness.

Pose blocks store [px, py, pz, qw, qx, qy, qz] and are updated by a
right-multiplicative rotation increment plus a linear translation add; the
6-dim tangent is ordered [rotation; translation].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from . import geometry
from .errors import DegenerateGeometry, NumericalFailure, StructuralError

__all__ = [
    "BlockKind",
    "ParameterBlock",
    "ResidualBlock",
    "SolveOptions",
    "SolveReport",
    "Problem",
    "solve",
    "cauchy_cost",
    "check_jacobians",
]


class BlockKind(Enum):
    POINT3 = "point3"
    SCALAR = "scalar"
    POSE = "pose"
    YAW = "yaw"


GLOBAL_DIM = {BlockKind.POINT3: 3, BlockKind.SCALAR: 1, BlockKind.POSE: 7, BlockKind.YAW: 1}
TANGENT_DIM = {BlockKind.POINT3: 3, BlockKind.SCALAR: 1, BlockKind.POSE: 6, BlockKind.YAW: 1}


class ParameterBlock:
    """Named unknown (or constant) of one of the supported kinds.

    Pose values are [p (3), q (4, wxyz)]; the quaternion is re-normalized
    after every update step.
    """

    __slots__ = ("id", "kind", "values", "constant")

    def __init__(self, id: str, kind: BlockKind, values, constant: bool = False):
        self.id = id
        self.kind = kind
        v = np.array(values, dtype=float).reshape(-1)
        if v.shape[0] != GLOBAL_DIM[kind]:
            raise StructuralError(
                f"block {id!r}: kind {kind.value} expects {GLOBAL_DIM[kind]} values, got {v.shape[0]}"
            )
        if not np.all(np.isfinite(v)):
            raise StructuralError(f"block {id!r}: non-finite initial values")
        if kind is BlockKind.POSE:
            v[3:] = geometry._qnormalize(v[3:])
        self.values = v
        self.constant = bool(constant)

    def __repr__(self) -> str:
        tag = " const" if self.constant else ""
        return f"ParameterBlock({self.id!r}, {self.kind.value}{tag})"


# fn(values, want_jac, ctx) -> (residual (dim,), jacobians per param (dim, tangent) or None)
ResidualFn = Callable[[Sequence[np.ndarray], bool, dict], tuple[np.ndarray, list | None]]


@dataclass
class ResidualBlock:
    """One term of the cost: residual callback, loss, and weighting.

    sqrt_weight (the square root of the information) may be a scalar, a
    per-row vector, or a full (dim, dim) matrix; it is applied to the
    residual and all Jacobians before the loss.
    """

    dim: int
    params: tuple
    fn: ResidualFn
    loss: float | None = None        # Cauchy scale c in meters, or None
    sqrt_weight: object = None
    elementwise: bool = False

    def weighted(self, r: np.ndarray, jacs: list | None):
        w = self.sqrt_weight
        if w is None:
            return r, jacs
        if np.isscalar(w):
            r = w * r
            if jacs is not None:
                jacs = [w * j for j in jacs]
            return r, jacs
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            r = w * r
            if jacs is not None:
                jacs = [w[:, None] * j for j in jacs]
            return r, jacs
        r = w @ r
        if jacs is not None:
            jacs = [w @ j for j in jacs]
        return r, jacs


def cauchy_cost(s: float, c: float) -> tuple[float, float, float]:
    """Cauchy robust loss rho(s) = c^2 ln(1 + s/c^2) with derivatives.

    s is the squared (weighted) residual norm; returns (rho, rho', rho'').
    rho'(0) = 1, so the loss is quadratic near the origin.
    """
    c2 = c * c
    t = 1.0 + s / c2
    return c2 * math.log(t), 1.0 / t, -1.0 / (c2 * t * t)


@dataclass
class SolveOptions:
    max_iters: int = 100
    rel_tol: float = 1e-8        # relative cost decrease below this -> converged
    grad_tol: float = 1e-10      # gradient max-norm below this -> converged
    initial_damping: float = 1e-6
    damping_increase: float = 10.0
    damping_decrease: float = 0.1
    max_damping: float = 1e10
    verbose: bool = False


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str             # "converged" | "max_iters" | "stalled"
    cost_trace: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "termination": self.termination,
            "cost_trace": list(self.cost_trace),
        }


class Problem:
    """A set of parameter blocks plus the residual blocks tying them together."""

    def __init__(self):
        self.blocks: dict = {}
        self.residuals: list = []

    def add_block(self, block: ParameterBlock) -> ParameterBlock:
        if block.id in self.blocks:
            raise StructuralError(f"duplicate block id {block.id!r}")
        self.blocks[block.id] = block
        return block

    def add_residual(self, residual: ResidualBlock) -> ResidualBlock:
        self.residuals.append(residual)
        return residual

    def block(self, id: str) -> ParameterBlock:
        return self.blocks[id]


def _plus(kind: BlockKind, values: np.ndarray, delta: np.ndarray) -> np.ndarray:
    if kind is BlockKind.POSE:
        out = values.copy()
        out[:3] = values[:3] + delta[3:6]
        dq = geometry._rotvec_to_quat(delta[0:3])
        out[3:] = geometry._qnormalize(geometry._qmul(values[3:], dq))
        return out
    if kind is BlockKind.YAW:
        y = values[0] + delta[0]
        return np.array([math.atan2(math.sin(y), math.cos(y))])
    return values + delta


def _validate_structure(problem: Problem) -> None:
    if not any(not b.constant for b in problem.blocks.values()):
        raise StructuralError("problem has no free parameter blocks")
    for rb in problem.residuals:
        for pid in rb.params:
            if pid not in problem.blocks:
                raise StructuralError(f"residual references unknown block {pid!r}")


def _layout(problem: Problem) -> tuple[dict, int]:
    offsets = {}
    n = 0
    for bid, blk in problem.blocks.items():
        if not blk.constant:
            td = TANGENT_DIM[blk.kind]
            offsets[bid] = (n, td)
            n += td
    return offsets, n


def _robust_cost(rb: ResidualBlock, r: np.ndarray):
    """Cost contribution and per-row IRLS weights of one weighted residual."""
    if rb.loss is None:
        s = float(r @ r)
        return s, None
    if rb.elementwise:
        s = r * r
        c2 = rb.loss * rb.loss
        t = 1.0 + s / c2
        cost = float(np.sum(c2 * np.log(t)))
        return cost, 1.0 / t
    rho, rho1, _ = cauchy_cost(float(r @ r), rb.loss)
    return rho, rho1


def _evaluate_cost(problem: Problem, values: Mapping[str, np.ndarray]) -> float:
    ctx: dict = {}
    total = 0.0
    for rb in problem.residuals:
        vals = [values[pid] for pid in rb.params]
        try:
            r, _ = rb.fn(vals, False, ctx)
        except (NumericalFailure, DegenerateGeometry):
            return math.inf
        r, _ = rb.weighted(np.asarray(r, dtype=float).reshape(-1), None)
        cost, _ = _robust_cost(rb, r)
        total += cost
    return total if math.isfinite(total) else math.inf


def _make_plan(problem: Problem, offsets) -> list:
    """Precompute, per residual block, the free-parameter indices and the
    tangent columns they scatter into (assembly is on the per-window hot path)."""
    plan = []
    for rb in problem.residuals:
        free = [i for i, pid in enumerate(rb.params) if not problem.blocks[pid].constant]
        if free:
            cols = np.concatenate(
                [
                    np.arange(offsets[rb.params[i]][0], sum(offsets[rb.params[i]]))
                    for i in free
                ]
            )
            ix = np.ix_(cols, cols)
        else:
            cols, ix = None, None
        plan.append((rb, free, cols, ix))
    return plan


def _build_normal_equations(problem: Problem, values, plan, n, validate: bool):
    """Assemble H, g, and the total cost at the given values.

    With validate=True, shapes are checked and non-finite evaluations raise
    (the initial-point contract); afterwards finiteness is checked once on
    the assembled system, and a non-finite result is reported via cost=inf
    so the caller can reject the step.
    """
    H = np.zeros((n, n))
    g = np.zeros(n)
    total = 0.0
    ctx: dict = {}
    for rb, free, cols, ix in plan:
        vals = [values[pid] for pid in rb.params]
        try:
            r, jacs = rb.fn(vals, True, ctx)
        except (NumericalFailure, DegenerateGeometry):
            if validate:
                raise
            return None, None, math.inf
        if validate:
            r = np.asarray(r, dtype=float).reshape(-1)
            if r.shape[0] != rb.dim:
                raise StructuralError(f"residual returned dim {r.shape[0]}, declared {rb.dim}")
            if jacs is None or len(jacs) != len(rb.params):
                raise StructuralError("residual did not return one Jacobian per parameter")
            jacs = [np.asarray(j, dtype=float) for j in jacs]
            for pid, J in zip(rb.params, jacs):
                blk = problem.blocks[pid]
                if J.shape != (rb.dim, TANGENT_DIM[blk.kind]):
                    raise StructuralError(
                        f"Jacobian for block {pid!r} has shape {J.shape}, "
                        f"expected {(rb.dim, TANGENT_DIM[blk.kind])}"
                    )
            if not (np.all(np.isfinite(r)) and all(np.all(np.isfinite(j)) for j in jacs)):
                raise NumericalFailure("non-finite residual or Jacobian during assembly")
        r, jacs = rb.weighted(r, jacs)

        cost, w = _robust_cost(rb, r)
        total += cost

        if not free:
            continue
        J_full = jacs[free[0]] if len(free) == 1 else np.hstack([jacs[i] for i in free])
        if w is None:
            JtJ = J_full.T @ J_full
            Jtr = J_full.T @ r
        elif np.isscalar(w):
            JtJ = w * (J_full.T @ J_full)
            Jtr = w * (J_full.T @ r)
        else:  # per-row weights from an elementwise loss
            JtJ = J_full.T @ (J_full * w[:, None])
            Jtr = J_full.T @ (w * r)

        H[ix] += 2.0 * JtJ
        g[cols] += 2.0 * Jtr
    if not math.isfinite(total) or not np.all(np.isfinite(H)) or not np.all(np.isfinite(g)):
        if validate:
            raise NumericalFailure("non-finite residual or Jacobian during assembly")
        return None, None, math.inf
    return H, g, total


def _apply_step(problem: Problem, values, offsets, delta):
    out = dict(values)
    for bid, (off, td) in offsets.items():
        blk = problem.blocks[bid]
        out[bid] = _plus(blk.kind, values[bid], delta[off : off + td])
    return out


def solve(problem: Problem, options: SolveOptions | None = None) -> SolveReport:
    """Run damped LM iterations on the problem, updating its blocks in place.

    Terminates when the relative cost decrease drops below rel_tol, the
    gradient max-norm drops below grad_tol, max_iters is reached, or the
    damping escalates past max_damping without an acceptable step (stalled).
    Accepted steps never increase the cost.
    """
    opts = options or SolveOptions()
    _validate_structure(problem)
    offsets, n = _layout(problem)
    plan = _make_plan(problem, offsets)
    values = {bid: blk.values.copy() for bid, blk in problem.blocks.items()}

    try:
        H, g, cost = _build_normal_equations(problem, values, plan, n, validate=True)
    except NumericalFailure:
        raise NumericalFailure("non-finite residual or Jacobian at the initial point")
    if not math.isfinite(cost):
        raise NumericalFailure("non-finite cost at the initial point")

    trace = [cost]
    initial_cost = cost
    lam = opts.initial_damping
    termination = "max_iters"
    iters = 0

    if cost == 0.0 or float(np.max(np.abs(g))) < opts.grad_tol:
        termination = "converged"
    else:
        for it in range(1, opts.max_iters + 1):
            iters = it
            D = np.clip(np.diag(H), 1e-12, None)
            try:
                step = np.linalg.solve(H + lam * np.diag(D), -g)
            except np.linalg.LinAlgError:
                step = None
            accepted = False
            if step is not None and np.all(np.isfinite(step)):
                candidate = _apply_step(problem, values, offsets, step)
                # build speculatively: accepted steps need H, g here anyway
                H_new, g_new, new_cost = _build_normal_equations(
                    problem, candidate, plan, n, validate=False
                )
                if new_cost <= cost:
                    rel_dec = (cost - new_cost) / max(cost, 1e-300)
                    values = candidate
                    cost = new_cost
                    H, g = H_new, g_new
                    trace.append(cost)
                    lam = lam * opts.damping_decrease
                    accepted = True
                    if opts.verbose:
                        print(f"  iter {it}: cost {cost:.6e} lam {lam:.1e}")
                    if float(np.max(np.abs(g))) < opts.grad_tol:
                        termination = "converged"
                        break
                    if rel_dec < opts.rel_tol:
                        termination = "converged"
                        break
            if not accepted:
                lam = lam * opts.damping_increase if lam > 0.0 else 1e-6
                if lam > opts.max_damping:
                    termination = "stalled"
                    break

    for bid, blk in problem.blocks.items():
        blk.values[:] = values[bid]
    return SolveReport(
        iterations=iters,
        initial_cost=initial_cost,
        final_cost=cost,
        termination=termination,
        cost_trace=trace,
    )


def _perturbed(kind: BlockKind, values: np.ndarray, k: int, h: float) -> np.ndarray:
    delta = np.zeros(TANGENT_DIM[kind])
    delta[k] = h
    return _plus(kind, values, delta)


def check_jacobians(
    residual: ResidualBlock,
    blocks: Sequence[ParameterBlock],
    step: float = 1e-6,
) -> float:
    """Compare the callback's analytic Jacobians to central finite differences.

    Pose blocks are perturbed on the tangent (rotation via the exponential,
    translation additively). Returns the worst relative error over all
    entries; raises NumericalFailure if any evaluation fails or is non-finite.
    """
    values = [b.values.copy() for b in blocks]
    try:
        r0, jacs = residual.fn(values, True, {})
    except NumericalFailure:
        raise
    except Exception as exc:
        raise NumericalFailure(f"residual evaluation failed: {exc}") from exc
    r0 = np.asarray(r0, dtype=float).reshape(-1)
    if jacs is None or len(jacs) != len(blocks):
        raise StructuralError("residual did not return one Jacobian per parameter")
    if not np.all(np.isfinite(r0)) or not all(np.all(np.isfinite(j)) for j in jacs):
        raise NumericalFailure("non-finite residual or Jacobian")

    worst = 0.0
    for bi, blk in enumerate(blocks):
        td = TANGENT_DIM[blk.kind]
        J = np.asarray(jacs[bi], dtype=float)
        if J.shape != (residual.dim, td):
            raise StructuralError(
                f"Jacobian for block {blk.id!r} has shape {J.shape}, expected {(residual.dim, td)}"
            )
        for k in range(td):
            vals_p = list(values)
            vals_m = list(values)
            vals_p[bi] = _perturbed(blk.kind, values[bi], k, +step)
            vals_m[bi] = _perturbed(blk.kind, values[bi], k, -step)
            try:
                rp = np.asarray(residual.fn(vals_p, False, {})[0], dtype=float).reshape(-1)
                rm = np.asarray(residual.fn(vals_m, False, {})[0], dtype=float).reshape(-1)
            except NumericalFailure:
                raise
            except Exception as exc:
                raise NumericalFailure(f"residual evaluation failed: {exc}") from exc
            if not (np.all(np.isfinite(rp)) and np.all(np.isfinite(rm))):
                raise NumericalFailure("non-finite residual during finite differencing")
            fd = (rp - rm) / (2.0 * step)
            denom = np.maximum(1.0, np.maximum(np.abs(J[:, k]), np.abs(fd)))
            err = float(np.max(np.abs(J[:, k] - fd) / denom))
            worst = max(worst, err)
    return worst
