"""Deterministic strategies, non-signalling polytope vertices, and
local / broadcast-local / NS2-bilocal bounds and membership tests.

Vertex enumeration uses the double description method in exact rational
arithmetic (gmpy2), converting to floating point only at the LP layer.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from gmpy2 import mpq, mpz

from .behaviours import Behaviour, BellExpression, Scenario, expression_from_correlators


class ScenarioTooLargeError(ValueError):
    """Vertex enumeration refused: scenario above the supported size."""


# ---------------------------------------------------------------------------
# Deterministic strategies


@dataclass(frozen=True)
class DeterministicStrategy:
    """Total input -> outcome-index map for one party (or party group)."""

    outcomes: tuple[int, ...]  # outcomes[x] for each input x

    def table(self, n_inputs: int, n_outputs: int) -> np.ndarray:
        t = np.zeros((n_outputs, n_inputs))
        for x, a in enumerate(self.outcomes):
            t[a, x] = 1.0
        return t


def enumerate_deterministic(n_inputs: int, n_outputs: int) -> list[DeterministicStrategy]:
    """All n_outputs**n_inputs single-party strategies, lexicographic."""
    return [
        DeterministicStrategy(outs)
        for outs in itertools.product(range(n_outputs), repeat=n_inputs)
    ]


def deterministic_tables(scenario: Scenario) -> np.ndarray:
    """Stack of all product-deterministic behaviour tables for a scenario."""
    per_party = [
        enumerate_deterministic(scenario.inputs[p], scenario.outputs[p])
        for p in range(scenario.parties)
    ]
    tables = []
    for combo in itertools.product(*per_party):
        t = np.ones(())
        for p, strat in enumerate(combo):
            t = np.multiply.outer(t, strat.table(scenario.inputs[p], scenario.outputs[p]))
        # axes now (o1, i1, o2, i2, ...) -> reorder to outputs-major
        n = scenario.parties
        perm = [2 * p for p in range(n)] + [2 * p + 1 for p in range(n)]
        tables.append(t.transpose(perm))
    return np.array(tables)


# ---------------------------------------------------------------------------
# Exact rational linear algebra


def _rref(rows: list[list], ncols: int) -> tuple[list[list], list[int]]:
    """Reduced row echelon form over mpq; returns (rref rows, pivot cols)."""
    m = [list(map(mpq, r)) for r in rows]
    pivots: list[int] = []
    r = 0
    for c in range(ncols):
        pivot = next((i for i in range(r, len(m)) if m[i][c] != 0), None)
        if pivot is None:
            continue
        m[r], m[pivot] = m[pivot], m[r]
        pv = m[r][c]
        m[r] = [v / pv for v in m[r]]
        for i in range(len(m)):
            if i != r and m[i][c] != 0:
                f = m[i][c]
                m[i] = [a - f * b for a, b in zip(m[i], m[r])]
        pivots.append(c)
        r += 1
        if r == len(m):
            break
    return m[:r], pivots


def _affine_parametrization(eq: list[list], rhs: list) -> tuple[list, list[list]]:
    """Solve E x = f exactly; return (x0, nullspace basis columns)."""
    ncols = len(eq[0])
    aug = [list(row) + [b] for row, b in zip(eq, rhs)]
    rr, pivots = _rref(aug, ncols)
    for row in rr:
        if all(v == 0 for v in row[:-1]) and row[-1] != 0:
            raise ValueError("equality system infeasible")
    free = [c for c in range(ncols) if c not in pivots]
    x0 = [mpq(0)] * ncols
    for row, pc in zip(rr, pivots):
        x0[pc] = row[-1]
    basis = []
    for fc in free:
        v = [mpq(0)] * ncols
        v[fc] = mpq(1)
        for row, pc in zip(rr, pivots):
            v[pc] = -row[fc]
        basis.append(v)
    return x0, basis


def _normalize_ray(ray: list) -> tuple:
    """Scale an mpq ray to coprime integers."""
    from gmpy2 import gcd, lcm

    den = mpz(1)
    for v in ray:
        den = lcm(den, v.denominator)
    ints = [mpz(v * den) for v in ray]
    g = mpz(0)
    for v in ints:
        g = gcd(g, v)
    if g == 0:
        raise ValueError("zero ray")
    return tuple(int(v // g) for v in ints)


def dd_extreme_rays(rows: list[list]) -> list[tuple]:
    """Extreme rays of the pointed cone {z : H z >= 0} (exact arithmetic).

    `rows` are integer/rational constraint rows.  Uses the incremental
    double description method with the combinatorial adjacency test.
    """
    m = len(rows)
    n = len(rows[0])
    H = [list(map(mpq, r)) for r in rows]

    # Initial simplicial subcone from n independent rows.
    basis_idx: list[int] = []
    work: list[list] = []
    for i, row in enumerate(H):
        trial = work + [list(row)]
        rr, piv = _rref(trial, n)
        if len(rr) > len(work):
            work = [list(map(mpq, r)) for r in rr]
            basis_idx.append(i)
        if len(basis_idx) == n:
            break
    if len(basis_idx) < n:
        raise ValueError("cone is not pointed (rank-deficient constraint set)")

    # Rays of {H_B z >= 0} are columns of H_B^{-1}: solve H_B R = I.
    hb = [H[i] for i in basis_idx]
    rays: list[tuple] = []
    for k in range(n):
        rhs = [mpq(1) if j == k else mpq(0) for j in range(n)]
        aug = [row + [rhs[j]] for j, row in enumerate(hb)]
        rr, piv = _rref(aug, n)
        sol = [mpq(0)] * n
        for row, pc in zip(rr, piv):
            sol[pc] = row[-1]
        rays.append(_normalize_ray(sol))

    processed = list(basis_idx)
    masks: dict[tuple, int] = {}
    for r in rays:
        mask = 0
        for i in processed:
            if _dot(H[i], r) == 0:
                mask |= 1 << i
        masks[r] = mask

    remaining = [i for i in range(m) if i not in set(basis_idx)]
    for i in remaining:
        h = H[i]
        plus, zero, minus = [], [], []
        vals = {}
        for r in rays:
            v = _dot(h, r)
            vals[r] = v
            (plus if v > 0 else zero if v == 0 else minus).append(r)
        if not minus:
            for r in zero:
                masks[r] |= 1 << i
            processed.append(i)
            continue
        new_rays: list[tuple] = []
        new_masks: dict[tuple, int] = {}
        nproc = len(processed)
        min_common = max(0, _rank_lower_bound(n) - 2)
        for rp in plus:
            mp_ = masks[rp]
            for rm in minus:
                common = mp_ & masks[rm]
                if common.bit_count() < min_common:
                    continue
                if not _adjacent(common, rp, rm, rays, masks):
                    continue
                comb = [vals[rp] * b - vals[rm] * a for a, b in zip(rp, rm)]
                nr = _normalize_ray(list(map(mpq, comb)))
                if nr in new_masks:
                    continue
                new_masks[nr] = common | (1 << i)
        for r in zero:
            masks[r] |= 1 << i
        rays = plus + zero + list(new_masks)
        masks = {r: masks[r] for r in plus + zero}
        masks.update(new_masks)
        processed.append(i)
    return rays


def _dot(row: list, ray: tuple):
    return sum(a * b for a, b in zip(row, ray))


def _rank_lower_bound(n: int) -> int:
    return n


def _adjacent(common: int, rp: tuple, rm: tuple, rays: list[tuple], masks: dict[tuple, int]) -> bool:
    for r in rays:
        if r is rp or r is rm or r == rp or r == rm:
            continue
        if masks[r] & common == common:
            return False
    return True


# ---------------------------------------------------------------------------
# NS polytope vertex enumeration


@dataclass
class NsVertex:
    scenario: Scenario
    exact_table: list  # flat list of mpq, outputs-major / inputs-minor layout
    behaviour: Behaviour


def _ns_constraint_system(scenario: Scenario) -> tuple[list[list[int]], list[int]]:
    """Equality rows (normalization + non-signalling) over the flat table."""
    shape = scenario.shape
    size = int(np.prod(shape))

    def flat(outs, xs):
        return int(np.ravel_multi_index(tuple(outs) + tuple(xs), shape))

    eq_rows: list[list[int]] = []
    rhs: list[int] = []
    n = scenario.parties
    out_ranges = [range(o) for o in scenario.outputs]
    in_ranges = [range(k) for k in scenario.inputs]
    for xs in itertools.product(*in_ranges):
        row = [0] * size
        for outs in itertools.product(*out_ranges):
            row[flat(outs, xs)] = 1
        eq_rows.append(row)
        rhs.append(1)
    for p in range(n):
        others = [q for q in range(n) if q != p]
        for outs_o in itertools.product(*[out_ranges[q] for q in others]):
            for xs_o in itertools.product(*[in_ranges[q] for q in others]):
                for x in range(1, scenario.inputs[p]):
                    row = [0] * size
                    for a in range(scenario.outputs[p]):
                        outs = [0] * n
                        xs = [0] * n
                        for q, o in zip(others, outs_o):
                            outs[q] = o
                        for q, xi in zip(others, xs_o):
                            xs[q] = xi
                        outs[p] = a
                        xs[p] = x
                        row[flat(outs, xs)] += 1
                        xs[p] = 0
                        row[flat(outs, xs)] -= 1
                    eq_rows.append(row)
                    rhs.append(0)
    return eq_rows, rhs


def _check_enumeration_size(scenario: Scenario) -> None:
    if any(o != 2 for o in scenario.outputs):
        raise ScenarioTooLargeError("NS enumeration supports binary outcomes only")
    if scenario.parties == 1:
        return
    if scenario.parties == 2:
        if max(scenario.inputs) > 4:
            raise ScenarioTooLargeError("two-party enumeration supports <= 4 inputs")
        return
    if scenario.parties == 3:
        if max(scenario.inputs) > 2:
            raise ScenarioTooLargeError("three-party enumeration supports binary inputs")
        return
    raise ScenarioTooLargeError("enumeration supports at most 3 parties")


def cache_dir() -> Path:
    env = os.environ.get("BROADCAST_BELL_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "broadcast_bell"


def enumerate_ns_vertices(scenario: Scenario, use_cache: bool = True) -> list[NsVertex]:
    """All extreme points of the non-signalling polytope, exact rationals."""
    _check_enumeration_size(scenario)
    if scenario.parties == 1:
        return [
            NsVertex(
                scenario,
                [mpq(int(x)) for x in strat.table(scenario.inputs[0], scenario.outputs[0]).ravel()],
                Behaviour(scenario, strat.table(scenario.inputs[0], scenario.outputs[0])),
            )
            for strat in enumerate_deterministic(scenario.inputs[0], scenario.outputs[0])
        ]
    key = "ns_" + "_".join(f"{i}x{o}" for i, o in zip(scenario.inputs, scenario.outputs))
    cache_file = cache_dir() / f"{key}.json"
    if use_cache and cache_file.exists():
        data = json.loads(cache_file.read_text())
        return [_vertex_from_strings(scenario, v) for v in data["vertices"]]

    eq_rows, rhs = _ns_constraint_system(scenario)
    x0, basis = _affine_parametrization(eq_rows, rhs)
    size = len(x0)
    k = len(basis)
    # Homogenized cone over z = (t, u): x_j = x0_j t + sum_i basis_i_j u_i >= 0, t >= 0.
    rows = []
    for j in range(size):
        rows.append([x0[j]] + [basis[i][j] for i in range(k)])
    rows.append([mpq(1)] + [mpq(0)] * k)
    rays = dd_extreme_rays(rows)
    vertices = []
    for ray in rays:
        t = ray[0]
        if t == 0:
            raise RuntimeError("unbounded direction in NS polytope enumeration")
        if t < 0:
            ray = tuple(-v for v in ray)
            t = ray[0]
        u = [mpq(v, t) for v in ray[1:]]
        x = [x0[j] + sum(basis[i][j] * u[i] for i in range(k)) for j in range(size)]
        vertices.append(_make_vertex(scenario, x))
    vertices.sort(key=lambda v: tuple(str(q) for q in v.exact_table))
    if use_cache:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        cache_file.write_text(
            json.dumps({"scenario": key, "vertices": [[str(q) for q in v.exact_table] for v in vertices]})
        )
    return vertices


def _make_vertex(scenario: Scenario, flat_exact: list) -> NsVertex:
    table = np.array([float(q) for q in flat_exact]).reshape(scenario.shape)
    return NsVertex(scenario, list(flat_exact), Behaviour(scenario, table))


def _vertex_from_strings(scenario: Scenario, strings: list[str]) -> NsVertex:
    return _make_vertex(scenario, [mpq(s) for s in strings])


def ns_vertex_tables(scenario: Scenario, use_cache: bool = True) -> np.ndarray:
    return np.array([v.behaviour.table for v in enumerate_ns_vertices(scenario, use_cache)])


# ---------------------------------------------------------------------------
# Bounds


def _expression_values(expr: BellExpression, tables: np.ndarray) -> np.ndarray:
    """Expression value per stacked table, using the exact scaled path when
    available (dyadic tables x integer coefficients sum exactly)."""
    if expr.coefficients_scaled is not None:
        raw = np.tensordot(tables, expr.coefficients_scaled, axes=expr.coefficients.ndim)
        return (raw + expr.constant * expr.coeff_denominator) / expr.coeff_denominator
    return np.tensordot(tables, expr.coefficients, axes=expr.coefficients.ndim) + expr.constant


def local_bound(expr: BellExpression, return_maximizers: bool = False):
    """Max over products of deterministic strategies (brute force)."""
    tables = deterministic_tables(expr.scenario)
    vals = _expression_values(expr, tables)
    best = float(vals.max())
    if return_maximizers:
        idx = np.nonzero(vals >= best - 1e-9)[0]
        return best, [Behaviour(expr.scenario, tables[i]) for i in idx]
    return best


def _group_vertex_tables(scenario: Scenario, group: Sequence[int], use_cache: bool = True) -> np.ndarray:
    sub = scenario.subscenario(sorted(group))
    if len(group) == 1:
        return deterministic_tables(sub)
    return ns_vertex_tables(sub, use_cache)


def _product_tables(scenario: Scenario, groups: Sequence[Sequence[int]], use_cache: bool = True) -> np.ndarray:
    """Stack of product behaviours: every combination of per-group vertices.

    Groups must partition the parties; parties within a group must be
    contiguous and in order (the ordering convention used throughout).
    """
    flat = [p for g in groups for p in sorted(g)]
    if flat != list(range(scenario.parties)):
        raise ValueError("groups must partition parties in order")
    stacks = [_group_vertex_tables(scenario, g, use_cache) for g in groups]
    combined = None
    for s in stacks:
        if combined is None:
            combined = s
            continue
        n1, n2 = combined.shape[0], s.shape[0]
        piece = combined.reshape(n1, 1, -1, 1) * s.reshape(1, n2, 1, -1)
        combined = piece.reshape((n1 * n2,) + combined.shape[1:] + s.shape[1:])
    # combined axes: (vertex, outs_g1, ins_g1, outs_g2, ins_g2, ...)
    n = scenario.parties
    sizes = [len(g) for g in groups]
    perm = [0]
    out_pos = {}
    pos = 1
    for gi, g in enumerate(groups):
        for j, p in enumerate(sorted(g)):
            out_pos[p] = pos + j
        pos += 2 * sizes[gi]
    in_pos = {}
    pos = 1
    for gi, g in enumerate(groups):
        for j, p in enumerate(sorted(g)):
            in_pos[p] = pos + sizes[gi] + j
        pos += 2 * sizes[gi]
    perm += [out_pos[p] for p in range(n)] + [in_pos[p] for p in range(n)]
    return combined.transpose(perm)


def broadcast_local_bound(
    expr: BellExpression,
    groups: Sequence[Sequence[int]],
    use_cache: bool = True,
    return_maximizers: bool = False,
):
    """Max of the expression over deterministic-source x per-group NS boxes.

    For two broadcast pairs (the four-party case) the product structure
    implements the pairwise correlator factorization.
    """
    tables = _product_tables(expr.scenario, groups, use_cache)
    vals = _expression_values(expr, tables)
    best = float(vals.max())
    if return_maximizers:
        idx = np.nonzero(vals >= best - 1e-9)[0]
        return best, [Behaviour(expr.scenario, tables[i]) for i in idx]
    return best


# ---------------------------------------------------------------------------
# Membership


def _membership_lp(b: Behaviour, vertex_tables: np.ndarray, tol: float = 1e-8):
    from .solvers import membership_in_hull

    return membership_in_hull(b.table.ravel(), vertex_tables.reshape(vertex_tables.shape[0], -1), tol)


def membership_broadcast_local(
    b: Behaviour, groups: Sequence[Sequence[int]], use_cache: bool = True, tol: float = 1e-8
) -> tuple[bool, BellExpression | None]:
    """Is `b` a mixture of deterministic-source x NS-box products?

    On failure, returns a separating Bell expression (witness) whose
    broadcast-local bound is violated by `b`.
    """
    tables = _product_tables(b.scenario, groups, use_cache)
    member, sep, offset = _membership_lp(b, tables, tol)
    if member:
        return True, None
    witness = BellExpression(
        b.scenario, sep.reshape(b.scenario.shape), name="membership-witness"
    )
    witness.broadcast_local_bound = offset
    return False, witness


def membership_ns2_bilocal(
    b: Behaviour, use_cache: bool = True, tol: float = 1e-8
) -> tuple[bool, BellExpression | None]:
    """Membership in the convex hull of the three bipartition models."""
    if b.scenario.parties != 3:
        raise ValueError("NS2-bilocality is defined for 3-party behaviours")
    groupings = [[[0], [1, 2]], [[0, 1], [2]], [[0, 2], [1]]]
    all_tables = []
    for groups in groupings:
        if groups == [[0, 2], [1]]:
            # middle party alone: build product with permuted grouping
            tables = _product_tables_permuted(b.scenario, [0, 2], [1], use_cache)
        else:
            tables = _product_tables(b.scenario, groups, use_cache)
        all_tables.append(tables)
    tables = np.concatenate(all_tables, axis=0)
    member, sep, offset = _membership_lp(b, tables, tol)
    if member:
        return True, None
    witness = BellExpression(b.scenario, sep.reshape(b.scenario.shape), name="ns2-witness")
    witness.broadcast_local_bound = offset
    return False, witness


def _product_tables_permuted(
    scenario: Scenario, ns_group: list[int], det_group: list[int], use_cache: bool = True
) -> np.ndarray:
    """Products of NS boxes on a non-contiguous party pair x deterministic rest."""
    sub_ns = scenario.subscenario(sorted(ns_group))
    sub_det = scenario.subscenario(sorted(det_group))
    ns = ns_vertex_tables(sub_ns, use_cache)
    det = deterministic_tables(sub_det)
    n1, n2 = ns.shape[0], det.shape[0]
    combined = (ns.reshape(n1, 1, -1, 1) * det.reshape(1, n2, 1, -1)).reshape(
        (n1 * n2,) + ns.shape[1:] + det.shape[1:]
    )
    order = sorted(ns_group) + sorted(det_group)
    n = scenario.parties
    out_pos = {p: 1 + j for j, p in enumerate(sorted(ns_group))}
    in_pos = {p: 1 + len(ns_group) + j for j, p in enumerate(sorted(ns_group))}
    base = 1 + 2 * len(ns_group)
    for j, p in enumerate(sorted(det_group)):
        out_pos[p] = base + j
        in_pos[p] = base + len(det_group) + j
    perm = [0] + [out_pos[p] for p in range(n)] + [in_pos[p] for p in range(n)]
    return combined.transpose(perm)


def broadcast_local_visibility(
    b_target: Behaviour,
    b_noise: Behaviour,
    groups: Sequence[Sequence[int]],
    use_cache: bool = True,
    v_max: float = 4.0,
) -> tuple[float, BellExpression]:
    """Largest v with v*b_target + (1-v)*b_noise broadcast-local, plus the
    separating Bell expression recovered from the LP duals.

    As in the steering case, v is allowed past 1 so the dual witness stays
    informative for starting points that are local at v = 1.
    """
    from scipy.optimize import linprog

    tables = _product_tables(b_target.scenario, groups, use_cache)
    nk = tables.shape[0]
    V = tables.reshape(nk, -1)
    pt = b_target.table.ravel()
    pn = b_noise.table.ravel()
    # variables: (weights w_k, v); maximize v.  The equalities are relaxed
    # by a hair so float noise in the quantum tables cannot make the LP
    # spuriously infeasible.
    slack = 1e-9
    a_eq = np.hstack([V.T, -(pt - pn)[:, None]])
    c = np.zeros(nk + 1)
    c[-1] = -1.0
    a_ub = np.vstack([a_eq, -a_eq])
    b_ub = np.concatenate([pn + slack, -(pn - slack)])
    res = linprog(
        c,
        A_ub=a_ub,
        b_ub=b_ub,
        bounds=[(0, None)] * nk + [(0, v_max)],
        method="highs",
    )
    if res.status != 0:
        from .solvers import SolverFailure

        raise SolverFailure(f"visibility LP failed: {res.message}")
    v_star = float(res.x[-1])
    m = pt.size
    marg = np.asarray(res.ineqlin.marginals, dtype=float)
    y = marg[:m] - marg[m:]
    witness = BellExpression(b_target.scenario, y.reshape(b_target.scenario.shape))
    slope = float(np.dot(y, pt - pn))
    if slope < 0:
        witness.coefficients = -witness.coefficients
        y = -y
    scale = np.max(np.abs(y))
    if scale > 0:
        witness.coefficients = witness.coefficients / scale
    witness.broadcast_local_bound = float(
        np.max(V @ witness.coefficients.ravel())
    )
    witness.name = "visibility-witness"
    return v_star, witness
