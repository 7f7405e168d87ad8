"""LP and small dense SDP solving with dual certificates.

LPs go through scipy's HiGHS interface; SDPs through cvxpy (CLARABEL,
with an SCS fallback).  All verdict thresholds come from the central
tolerance configuration.  Infeasibility is always reported through an
explicit certificate, never inferred from a solver failure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import cvxpy as cp
import numpy as np
from scipy.optimize import linprog

from .config import DEFAULT_TOL


class SolverFailure(RuntimeError):
    """Numerical failure distinct from a certified infeasibility."""


@dataclass
class LpProblem:
    """min c.x  s.t.  A_eq x = b_eq,  A_ub x <= b_ub,  x >= 0 where flagged."""

    c: np.ndarray
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    a_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    nonneg: bool = True


@dataclass
class LpResult:
    status: str  # optimal | infeasible | unbounded
    x: np.ndarray | None = None
    objective: float | None = None
    dual_eq: np.ndarray | None = None
    dual_ub: np.ndarray | None = None
    farkas: np.ndarray | None = None  # certificate (y_eq, y_ub) stacked
    farkas_violation: float | None = None


def solve_lp(p: LpProblem, tol: float = DEFAULT_TOL.lp_feasibility) -> LpResult:
    bounds = (0, None) if p.nonneg else (None, None)
    res = linprog(
        p.c,
        A_eq=p.a_eq,
        b_eq=p.b_eq,
        A_ub=p.a_ub,
        b_ub=p.b_ub,
        bounds=bounds,
        method="highs",
    )
    if res.status == 0:
        return LpResult(
            "optimal",
            x=np.asarray(res.x),
            objective=float(res.fun),
            dual_eq=None if p.a_eq is None else np.asarray(res.eqlin.marginals),
            dual_ub=None if p.a_ub is None else np.asarray(res.ineqlin.marginals),
        )
    if res.status == 2:
        y, viol = _farkas_certificate(p, tol)
        return LpResult("infeasible", farkas=y, farkas_violation=viol)
    if res.status == 3:
        return LpResult("unbounded")
    raise SolverFailure(f"linprog failed: {res.message}")


def _farkas_certificate(p: LpProblem, tol: float) -> tuple[np.ndarray, float]:
    """For infeasible {A_eq x = b_eq, A_ub x <= b_ub, x >= 0}: find
    y = (y_eq free, y_ub <= 0) with A_eq^T y_eq + A_ub^T y_ub <= 0 and
    b_eq.y_eq + b_ub.y_ub > 0 (normalized |y| <= 1)."""
    if not p.nonneg:
        raise SolverFailure("Farkas extraction implemented for x >= 0 problems")
    n = p.c.shape[0]
    blocks_a = []
    blocks_b = []
    if p.a_eq is not None:
        blocks_a.append(np.asarray(p.a_eq))
        blocks_b.append(np.asarray(p.b_eq))
    if p.a_ub is not None:
        blocks_a.append(np.asarray(p.a_ub))
        blocks_b.append(np.asarray(p.b_ub))
    a_all = np.vstack(blocks_a)
    b_all = np.concatenate(blocks_b)
    m_eq = 0 if p.a_eq is None else p.a_eq.shape[0]
    m = a_all.shape[0]
    # maximize b.y  <=>  minimize -b.y ; constraints A^T y <= 0 ; |y| <= 1,
    # y_ub <= 0.
    ub_rows = a_all.T
    ub_rhs = np.zeros(n)
    bounds = [(-1.0, 1.0)] * m_eq + [(-1.0, 0.0)] * (m - m_eq)
    res = linprog(-b_all, A_ub=ub_rows, b_ub=ub_rhs, bounds=bounds, method="highs")
    if res.status != 0:
        raise SolverFailure("Farkas LP did not solve")
    viol = float(-res.fun)
    if viol <= tol:
        raise SolverFailure(
            f"claimed infeasibility but Farkas violation {viol:.2e} <= {tol:.0e}"
        )
    return np.asarray(res.x), viol


def membership_in_hull(
    point: np.ndarray, vertices: np.ndarray, tol: float = DEFAULT_TOL.lp_feasibility
) -> tuple[bool, np.ndarray | None, float | None]:
    """Is `point` in conv(rows of `vertices`)?

    Returns (member, separating_vector, offset): on failure the
    hyperplane satisfies s.v <= offset for all vertices and
    s.point > offset + tol.
    """
    nv, d = vertices.shape
    prob = LpProblem(
        c=np.zeros(nv),
        a_eq=np.vstack([vertices.T, np.ones((1, nv))]),
        b_eq=np.concatenate([point, [1.0]]),
    )
    res = solve_lp(prob, tol)
    if res.status == "optimal":
        return True, None, None
    if res.status != "infeasible":
        raise SolverFailure(f"membership LP status {res.status}")
    # Separating hyperplane: max s.point - c  s.t.  s.v - c <= 0, |s| <= 1.
    # Variables (s, c).
    a_ub = np.hstack([vertices, -np.ones((nv, 1))])
    c_vec = np.concatenate([-point, [1.0]])
    bounds = [(-1.0, 1.0)] * d + [(None, None)]
    lp = linprog(c_vec, A_ub=a_ub, b_ub=np.zeros(nv), bounds=bounds, method="highs")
    if lp.status != 0:
        raise SolverFailure("separating-hyperplane LP failed")
    s = np.asarray(lp.x[:d])
    offset = float(lp.x[d])
    gap = float(s @ point - offset)
    if gap <= tol:
        raise SolverFailure(
            f"membership LP infeasible but separation gap {gap:.2e} <= {tol:.0e}"
        )
    return False, s, offset


# ---------------------------------------------------------------------------
# SDP layer


@dataclass
class SdpConstraint:
    """sum_b Tr(coeff_b X_b) == rhs over Hermitian blocks."""

    coeffs: list[tuple[int, np.ndarray]]
    rhs: float


@dataclass
class SdpProblem:
    """maximize sum_b Tr(obj_b X_b)  s.t.  X_b >= 0 and linear equalities."""

    block_dims: list[int]
    objective: list[tuple[int, np.ndarray]] = field(default_factory=list)
    constraints: list[SdpConstraint] = field(default_factory=list)
    trace_normalized: bool = False  # adds sum_b Tr(X_b) == 1


@dataclass
class SdpResult:
    status: str  # optimal | infeasible | unbounded
    objective: float | None = None
    blocks: list[np.ndarray] | None = None
    dual: np.ndarray | None = None  # one multiplier per constraint


def solve_cvxpy(problem: cp.Problem, tol: float = DEFAULT_TOL.sdp_feasibility) -> str:
    """Solve with CLARABEL, fall back to SCS; normalize the status string."""
    try:
        problem.solve(solver=cp.CLARABEL)
    except (cp.error.SolverError, Exception):
        problem._status = "failed"  # noqa: SLF001 - force fallback
    status = problem.status or "failed"
    if status not in ("optimal", "infeasible", "unbounded"):
        problem.solve(solver=cp.SCS, eps=1e-9, max_iters=200_000)
        status = problem.status or "failed"
    if status.startswith("optimal"):
        return "optimal"
    if status.startswith("infeasible"):
        return "infeasible"
    if status.startswith("unbounded"):
        return "unbounded"
    raise SolverFailure(f"SDP solver returned status {status}")


def solve_sdp(p: SdpProblem, tol: float = DEFAULT_TOL.sdp_feasibility) -> SdpResult:
    xs = [cp.Variable((d, d), hermitian=True) if d > 1 else cp.Variable((1, 1), symmetric=True) for d in p.block_dims]
    cons = [x >> 0 for x in xs]
    eqs = []
    for c in p.constraints:
        expr = sum(cp.real(cp.trace(np.asarray(m, dtype=complex) @ xs[b])) for b, m in c.coeffs)
        eqs.append(expr == c.rhs)
    if p.trace_normalized:
        eqs.append(sum(cp.real(cp.trace(x)) for x in xs) == 1.0)
    obj = sum(cp.real(cp.trace(np.asarray(m, dtype=complex) @ xs[b])) for b, m in p.objective)
    if isinstance(obj, int):
        obj = cp.Constant(0.0)
    prob = cp.Problem(cp.Maximize(obj), cons + eqs)
    status = solve_cvxpy(prob, tol)
    if status != "optimal":
        return SdpResult(status)
    dual = np.array([float(np.real(eq.dual_value)) for eq in eqs]) if eqs else None
    return SdpResult(
        "optimal",
        objective=float(prob.value),
        blocks=[np.asarray(x.value) for x in xs],
        dual=dual,
    )


def dump_problem(p: SdpProblem, path) -> None:
    """Sparse-triplet text dump for cross-checking against external solvers."""
    with open(path, "w") as fh:
        fh.write(f"blocks {' '.join(str(d) for d in p.block_dims)}\n")
        for b, m in p.objective:
            for (i, j), v in np.ndenumerate(np.asarray(m)):
                if v != 0:
                    fh.write(f"obj {b} {i} {j} {complex(v).real} {complex(v).imag}\n")
        for k, c in enumerate(p.constraints):
            for b, m in c.coeffs:
                for (i, j), v in np.ndenumerate(np.asarray(m)):
                    if v != 0:
                        fh.write(f"con {k} {b} {i} {j} {complex(v).real} {complex(v).imag}\n")
            fh.write(f"rhs {k} {c.rhs}\n")
