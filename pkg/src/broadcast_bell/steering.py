"""Assemblages, LHS bounds and broadcast-steering optimization.

The trusted party (Alice) holds subsystem 0.  The untrusted side is
either Bob alone (standard steering) or the output parties of a
broadcast channel, in which case the hidden-state decomposition runs
over the extremal non-signalling boxes of the untrusted scenario.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from . import linalg as la
from .behaviours import Scenario, binary_scenario
from .config import DEFAULT_TOL
from .polytopes import deterministic_tables, ns_vertex_tables
from .quantum import (
    ChoiState,
    DensityMatrix,
    MeasurementAssembly,
    Povm,
    apply_choi,
    random_isometry_choi,
    random_projective_assembly,
)
from .solvers import SdpConstraint, SdpProblem, SolverFailure, solve_cvxpy, solve_sdp


@dataclass
class Assemblage:
    """Unnormalized trusted-party states sigma[outs..., ins...] (d x d each)."""

    scenario: Scenario  # untrusted parties only
    trusted_dim: int
    sigma: np.ndarray  # shape (*outputs, *inputs, d, d)

    def __post_init__(self):
        expect = self.scenario.shape + (self.trusted_dim, self.trusted_dim)
        if self.sigma.shape != expect:
            raise ValueError(f"sigma shape {self.sigma.shape} != {expect}")

    def validate(self, tol: float = 1e-9) -> "Assemblage":
        n = self.scenario.parties
        reduced = self.sigma.sum(axis=tuple(range(n)))
        ref = reduced[(0,) * n]
        for xs in itertools.product(*[range(k) for k in self.scenario.inputs]):
            if np.max(np.abs(reduced[xs] - ref)) > tol:
                raise ValueError("assemblage signals to the trusted party")
        if abs(np.trace(ref).real - 1.0) > tol:
            raise ValueError("assemblage not normalized")
        for idx in itertools.product(*[range(s) for s in self.scenario.shape]):
            if float(np.linalg.eigvalsh(la.assert_hermitian(self.sigma[idx], 1e-8))[0]) < -tol:
                raise ValueError("assemblage element not PSD")
        return self

    def probabilities(self) -> np.ndarray:
        return np.real(np.trace(self.sigma, axis1=-2, axis2=-1))


@dataclass
class SteeringFunctional:
    """Coefficient blocks F[outs..., ins...] with a cached LHS bound."""

    scenario: Scenario
    trusted_dim: int
    coeffs: np.ndarray  # same layout as Assemblage.sigma
    lhs_bound: float | None = None

    def evaluate(self, a: Assemblage) -> float:
        d = self.trusted_dim
        return func_value(self, a.sigma.reshape(-1, d, d))


def assemblage_from_state(
    state: DensityMatrix,
    assemblies: list[MeasurementAssembly],
    channel: ChoiState | None = None,
) -> Assemblage:
    """sigma_{outs|ins} = Tr_untrusted[(1 x effects) rho], with the optional
    broadcast channel applied to subsystem 1 first."""
    d_a = state.dim // 2 if channel is None else state.dim // channel.d_in
    if channel is not None:
        rho = apply_choi(channel, state, [d_a, channel.d_in], 1).matrix
        dims = [d_a] + list(channel.d_out)
    else:
        rho = state.matrix
        dims = [d_a, state.dim // d_a]
    if len(assemblies) != len(dims) - 1:
        raise la.DimensionMismatchError("one assembly per untrusted party required")
    for m, d in zip(assemblies, dims[1:]):
        if m.dim != d:
            raise la.DimensionMismatchError("measurement dim mismatch")
    sc = Scenario(tuple(m.inputs for m in assemblies), tuple(m.outcomes for m in assemblies))
    sigma = np.zeros(sc.shape + (d_a, d_a), dtype=complex)
    for xs in itertools.product(*[range(m.inputs) for m in assemblies]):
        for outs in itertools.product(*[range(m.outcomes) for m in assemblies]):
            op = la.kron_all(
                [np.eye(d_a)] + [assemblies[p].effect(outs[p], xs[p]) for p in range(len(assemblies))]
            )
            sigma[outs + xs] = la.partial_trace(op @ rho, dims, 0)
    return Assemblage(sc, d_a, sigma)


# ---------------------------------------------------------------------------
# LHS bounds


def _response_ops(f: SteeringFunctional, response_tables: np.ndarray) -> np.ndarray:
    """M_k = sum_{outs,ins} F_{outs|ins} D_k(outs|ins) for each response table."""
    nk = response_tables.shape[0]
    flatF = f.coeffs.reshape(-1, f.trusted_dim, f.trusted_dim)
    flatD = response_tables.reshape(nk, -1)
    return np.tensordot(flatD, flatF, axes=(1, 0))


def lhs_bound(f: SteeringFunctional, response_tables: np.ndarray | None = None) -> float:
    """Closed-form LHS bound: max_k lambda_max(M_k).

    By default the hidden models respond with deterministic strategies;
    pass NS vertex tables for the broadcast-LHS bound.
    """
    if response_tables is None:
        response_tables = deterministic_tables(f.scenario)
    ops = _response_ops(f, response_tables)
    return float(max(np.linalg.eigvalsh(la.assert_hermitian(m, 1e-8))[-1] for m in ops))


def broadcast_lhs_bound(f: SteeringFunctional, use_cache: bool = True) -> float:
    return lhs_bound(f, ns_vertex_tables(f.scenario, use_cache))


def lhs_bound_sdp(f: SteeringFunctional, response_tables: np.ndarray | None = None) -> float:
    """SDP form of the LHS bound (oracle for the closed form)."""
    if response_tables is None:
        response_tables = deterministic_tables(f.scenario)
    ops = _response_ops(f, response_tables)
    p = SdpProblem(
        block_dims=[f.trusted_dim] * len(ops),
        objective=[(k, m) for k, m in enumerate(ops)],
        trace_normalized=True,
    )
    res = solve_sdp(p)
    if res.status != "optimal":
        raise SolverFailure(f"LHS bound SDP status {res.status}")
    return res.objective


# ---------------------------------------------------------------------------
# Visibility SDP


@dataclass
class VisibilityResult:
    v_star: float
    witness: SteeringFunctional
    witness_bound: float


def lhs_visibility(
    sigma_nl: Assemblage,
    sigma_sep: Assemblage,
    response_tables: np.ndarray,
    v_max: float = 4.0,
) -> VisibilityResult:
    """Largest v such that v*sigma_nl + (1-v)*sigma_sep has an LHS model
    over the given response vertices; dual equality multipliers give the
    violated steering functional for v > v*."""
    sc = sigma_nl.scenario
    d = sigma_nl.trusted_dim
    nk = response_tables.shape[0]
    flatD = response_tables.reshape(nk, -1)
    n_idx = flatD.shape[1]
    nl_flat = sigma_nl.sigma.reshape(n_idx, d, d)
    sep_flat = sigma_sep.sigma.reshape(n_idx, d, d)

    v = cp.Variable()
    sig = [cp.Variable((d, d), hermitian=True) for _ in range(nk)]
    cons = [s >> 0 for s in sig]
    eqs = []
    for j in range(n_idx):
        model = sum(flatD[k, j] * sig[k] for k in range(nk) if flatD[k, j] != 0)
        target = v * nl_flat[j] + (1 - v) * sep_flat[j]
        eqs.append(model == target)
    # The cap sits well above 1: past 1 the interpolation leaves the state
    # set, but the SDP still bounds v and its dual witness stays informative,
    # which keeps the outer see-saw moving when a random start is
    # unsteerable at v = 1.
    cons += eqs + [v >= 0.0, v <= v_max]
    prob = cp.Problem(cp.Maximize(v), cons)
    status = solve_cvxpy(prob)
    if status != "optimal":
        raise SolverFailure(f"visibility SDP status {status}")
    v_star = float(v.value)
    # Dual of sigma_{j} equality gives F up to sign; normalize so that the
    # functional increases with v (witness is violated above v*).
    F = np.zeros(sc.shape + (d, d), dtype=complex)
    flatF = F.reshape(n_idx, d, d)
    for j, eq in enumerate(eqs):
        dv = np.asarray(eq.dual_value)
        flatF[j] = 0.5 * (dv + dv.conj().T)
    scale = np.max(np.abs(F))
    if scale > 0:
        F /= scale
    func = SteeringFunctional(sc, d, F)
    slope = func_value(func, nl_flat) - func_value(func, sep_flat)
    if slope < 0:
        func.coeffs = -func.coeffs
    func.lhs_bound = lhs_bound(func, response_tables)
    return VisibilityResult(v_star, func, func.lhs_bound)


def func_value(f: SteeringFunctional, flat_sigma: np.ndarray) -> float:
    flatF = f.coeffs.reshape(flat_sigma.shape)
    return float(np.real(np.einsum("kij,kji->", flatF, flat_sigma)))


# ---------------------------------------------------------------------------
# See-saw over measurements and channel


def _measurement_objective(
    f_coeffs: np.ndarray,
    rho_out: np.ndarray,
    dims: list[int],
    assemblies: list[MeasurementAssembly],
    party: int,
) -> list[list[np.ndarray]]:
    """G[x][a] such that the functional value is sum Tr(E_{a|x} G[x][a]),
    for the effects of untrusted party `party` (subsystem party+1)."""
    n_unt = len(assemblies)
    sc_shape = tuple(m.outcomes for m in assemblies) + tuple(m.inputs for m in assemblies)
    G = [
        [np.zeros((dims[party + 1], dims[party + 1]), dtype=complex) for _ in range(assemblies[party].outcomes)]
        for _ in range(assemblies[party].inputs)
    ]
    for xs in itertools.product(*[range(m.inputs) for m in assemblies]):
        for outs in itertools.product(*[range(m.outcomes) for m in assemblies]):
            fco = f_coeffs[outs + xs]
            if not np.any(fco):
                continue
            # Tr(F sigma) = Tr[(F x effects) rho], so the trusted slot carries
            # F itself and G is a plain partial trace.
            ops = [np.asarray(fco)]
            for q in range(n_unt):
                if q == party:
                    ops.append(np.eye(dims[q + 1]))
                else:
                    ops.append(assemblies[q].effect(outs[q], xs[q]))
            big = la.kron_all(ops) @ rho_out
            red = la.partial_trace(big, dims, party + 1)
            G[xs[party]][outs[party]] += red
    return G


def _update_binary_povm(G: list[list[np.ndarray]]) -> Povm:
    """Closed-form optimum of sum_a Tr(E_a G_a) for a binary POVM."""
    diff = la.assert_hermitian(G[0] - G[1], 1e-7)
    vals, vecs = np.linalg.eigh(diff)
    pos = vecs[:, vals > 0]
    p0 = pos @ pos.conj().T if pos.size else np.zeros_like(diff)
    d = diff.shape[0]
    return Povm([p0, np.eye(d) - p0])


def choi_objective_matrix(
    rho: np.ndarray, dims: list[int], acted: int, S: np.ndarray, d_out: int
) -> np.ndarray:
    """W with Tr(S (1 x Omega x 1)(rho)) = Tr(rho_Omega W) for any Choi state.

    `S` acts on the output space (acted subsystem replaced by dimension
    d_out at the same slot)."""
    n = len(dims)
    d_in = dims[acted]
    d_rest = int(np.prod(dims)) // d_in
    out_dims = list(dims)
    out_dims[acted] = d_out
    order = [i for i in range(n) if i != acted] + [acted]
    # rho with acted subsystem last
    t = rho.reshape(*dims, *dims).transpose(order + [i + n for i in order])
    rho_m = t.reshape(d_rest, d_in, d_rest, d_in)
    s = S.reshape(*out_dims, *out_dims).transpose(order + [i + n for i in order])
    s_m = s.reshape(d_rest, d_out, d_rest, d_out)
    w = np.einsum("aibj,bqap->jqip", rho_m, s_m)
    w = w.reshape(d_in * d_out, d_in * d_out)
    return 0.5 * (w + w.conj().T)


def _update_choi(W: np.ndarray, d_in: int, d_out: tuple[int, ...]) -> ChoiState:
    """SDP: maximize Tr(rho_Omega W) over valid Choi states."""
    d_o = int(np.prod(d_out))
    n = d_in * d_o
    X = cp.Variable((n, n), hermitian=True)
    pt_blocks = cp.partial_trace(X, [d_in, d_o], 1)
    prob = cp.Problem(
        cp.Maximize(cp.real(cp.trace(W @ X))),
        [X >> 0, pt_blocks == np.eye(d_in)],
    )
    status = solve_cvxpy(prob)
    if status != "optimal":
        raise SolverFailure(f"Choi update SDP status {status}")
    x = np.asarray(X.value)
    x = 0.5 * (x + x.conj().T)
    # Repair tiny constraint violations before revalidating.
    vals, vecs = np.linalg.eigh(x)
    x = vecs @ np.diag(np.maximum(vals, 0.0)) @ vecs.conj().T
    red = la.partial_trace(x, [d_in, d_o], 0)
    rv, rw = np.linalg.eigh(red)
    inv_sqrt = rw @ np.diag(1.0 / np.sqrt(np.maximum(rv, 1e-14))) @ rw.conj().T
    s = np.kron(inv_sqrt, np.eye(d_o))
    return ChoiState(s @ x @ s.conj().T, d_in, d_out)


@dataclass
class SteeringSeesawResult:
    v_star: float
    assemblies: list[MeasurementAssembly]
    channel: ChoiState
    witness: SteeringFunctional
    trace: list[float] = field(default_factory=list)
    converged: bool = True
    seed: int | None = None


def _functional_seesaw(
    func: SteeringFunctional,
    state: DensityMatrix,
    assemblies: list[MeasurementAssembly],
    channel: ChoiState,
    max_iters: int = 60,
    tol: float = DEFAULT_TOL.seesaw_convergence,
) -> tuple[float, list[MeasurementAssembly], ChoiState]:
    """Maximize a steering functional over untrusted POVMs and the channel."""
    n_unt = len(assemblies)
    d_a = state.dim // channel.d_in
    prev = -np.inf
    for _ in range(max_iters):
        rho_out = apply_choi(channel, state, [d_a, channel.d_in], 1).matrix
        dims = [d_a] + list(channel.d_out)
        for p in range(n_unt):
            G = _measurement_objective(func.coeffs, rho_out, dims, assemblies, p)
            assemblies[p] = MeasurementAssembly(
                [_update_binary_povm(g) for g in G], party=assemblies[p].party
            )
        # Channel step: S = sum F x effects over the (A, out...) space.
        S = np.zeros((state.dim // channel.d_in * int(np.prod(channel.d_out)),) * 2, dtype=complex)
        for xs in itertools.product(*[range(m.inputs) for m in assemblies]):
            for outs in itertools.product(*[range(m.outcomes) for m in assemblies]):
                fco = func.coeffs[outs + xs]
                if not np.any(fco):
                    continue
                S += la.kron_all(
                    [np.asarray(fco)]
                    + [assemblies[q].effect(outs[q], xs[q]) for q in range(n_unt)]
                )
        W = choi_objective_matrix(
            state.matrix, [d_a, channel.d_in], 1, S, int(np.prod(channel.d_out))
        )
        channel = _update_choi(W, channel.d_in, channel.d_out)
        value = func.evaluate(assemblage_from_state(state, assemblies, channel))
        # Each step is optimal given the others, so any decrease is solver
        # noise; stop rather than chase it.
        if abs(value - prev) < tol or value < prev:
            prev = value
            break
        prev = value
    return prev, assemblies, channel


def seesaw_steering(
    rho_nl: DensityMatrix,
    rho_sep: DensityMatrix,
    n_broadcast: int = 2,
    settings: int = 2,
    restarts: int = 10,
    seed: int = 0,
    max_outer: int = 40,
    kicks: int = 1,
    tol: float = DEFAULT_TOL.seesaw_convergence,
    use_cache: bool = True,
    verbose: bool = False,
) -> SteeringSeesawResult:
    """Heuristic search for the smallest v with broadcast steering of
    rho_v = v rho_nl + (1-v) rho_sep.

    Alternates the visibility SDP (which yields v* and a witness) with a
    see-saw maximizing the witness over measurements and the channel.
    """
    sc = binary_scenario(*([settings] * n_broadcast))
    vertices = ns_vertex_tables(sc, use_cache)
    best: SteeringSeesawResult | None = None
    rng = np.random.default_rng(seed)
    for r in range(restarts):
        assemblies = [
            random_projective_assembly(2, settings, rng, party=f"P{p+1}")
            for p in range(n_broadcast)
        ]
        channel = random_isometry_choi(2, (2,) * n_broadcast, rng)
        v_prev = 2.0
        converged = False
        trace = []
        kicks_left = kicks
        best_here = None
        for _ in range(max_outer):
            sig_nl = assemblage_from_state(rho_nl, assemblies, channel)
            sig_sep = assemblage_from_state(rho_sep, assemblies, channel)
            res = lhs_visibility(sig_nl, sig_sep, vertices)
            trace.append(res.v_star)
            if best_here is None or res.v_star < best_here.v_star:
                best_here = SteeringSeesawResult(
                    res.v_star,
                    [MeasurementAssembly(list(m.povms), party=m.party) for m in assemblies],
                    channel,
                    res.witness,
                    trace,
                    False,
                    seed,
                )
            stalled = (
                res.v_star >= 4.0 - 1e-6 or abs(res.v_star - v_prev) < tol
            )
            if stalled:
                if kicks_left <= 0:
                    converged = True
                    break
                # Basin hop: perturb the channel and measurements to escape
                # the local optimum just reached.
                kicks_left -= 1
                kick = random_isometry_choi(2, (2,) * n_broadcast, rng)
                mixed = 0.7 * channel.matrix + 0.3 * kick.matrix
                channel = ChoiState(mixed, channel.d_in, channel.d_out)
                fresh = [
                    random_projective_assembly(2, settings, rng, party=f"P{p+1}")
                    for p in range(n_broadcast)
                ]
                assemblies = [
                    MeasurementAssembly(
                        [
                            Povm(
                                [
                                    0.8 * old.effect(a, x) + 0.2 * new.effect(a, x)
                                    for a in range(2)
                                ]
                            )
                            for x, _ in enumerate(old.povms)
                        ],
                        party=old.party,
                    )
                    for old, new in zip(assemblies, fresh)
                ]
                v_prev = 2.0
                continue
            v_prev = res.v_star
            v_state = min(res.v_star, 1.0)
            _, assemblies, channel = _functional_seesaw(
                res.witness,
                DensityMatrix(v_state * rho_nl.matrix + (1 - v_state) * rho_sep.matrix),
                assemblies,
                channel,
            )
        best_here.converged = converged
        candidate = best_here
        if verbose:
            print(f"restart {r}: v* = {candidate.v_star:.6f} (converged={converged})")
        if best is None or candidate.v_star < best.v_star:
            best = candidate
    return best
