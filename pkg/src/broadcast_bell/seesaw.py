"""See-saw optimization of Bell expression violations in broadcast networks.

A network is a source state whose subsystems are either measured directly
or first passed through a broadcast channel whose output subsystems are
measured by separate parties.  Measurement updates are closed-form
(eigenspace projectors); channel updates are small SDPs over Choi states.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from . import linalg as la
from .behaviours import (
    Behaviour,
    BellExpression,
    Scenario,
    all_fail_strategies,
    apply_detector_inefficiency,
    ns2_inequality_16,
)
from .config import DEFAULT_TOL
from .quantum import (
    ChoiState,
    DensityMatrix,
    MeasurementAssembly,
    apply_choi,
    behaviour_from_quantum,
    povm_lhv_condition,
    random_isometry_choi,
    random_projective_assembly,
    rho_povm_family,
)
from .steering import _update_binary_povm, _update_choi, choi_objective_matrix


@dataclass
class Network:
    """Source state + optional broadcast channel per source subsystem.

    Parties are ordered slot by slot: a slot without a channel hosts one
    party measuring that subsystem; a slot with a channel hosts one party
    per channel output subsystem.
    """

    state: DensityMatrix
    source_dims: tuple[int, ...]
    channels: list[ChoiState | None]

    def __post_init__(self):
        if int(np.prod(self.source_dims)) != self.state.dim:
            raise la.DimensionMismatchError("source dims do not match state")
        if len(self.channels) != len(self.source_dims):
            raise la.DimensionMismatchError("one channel slot per subsystem")
        for ch, d in zip(self.channels, self.source_dims):
            if ch is not None and ch.d_in != d:
                raise la.DimensionMismatchError("channel input dim mismatch")

    @property
    def party_dims(self) -> list[int]:
        dims = []
        for ch, d in zip(self.channels, self.source_dims):
            dims.extend([d] if ch is None else list(ch.d_out))
        return dims

    def output_state(self, skip_slot: int | None = None) -> tuple[np.ndarray, list[int]]:
        """State after applying all channels (optionally skipping one slot);
        each slot keeps its position, with outputs grouped into one factor."""
        rho = self.state
        dims = [int(d) for d in self.source_dims]
        for i, ch in enumerate(self.channels):
            if ch is None or i == skip_slot:
                continue
            rho = apply_choi(ch, rho, dims, i)
            dims[i] = int(np.prod(ch.d_out))
        return rho.matrix, dims

    def behaviour(self, assemblies: list[MeasurementAssembly]) -> Behaviour:
        rho, _ = self.output_state()
        return behaviour_from_quantum(DensityMatrix(rho), assemblies)


def bell_operator(coeffs: np.ndarray, assemblies: list[MeasurementAssembly]) -> np.ndarray:
    n = len(assemblies)
    dim = int(np.prod([m.dim for m in assemblies]))
    S = np.zeros((dim, dim), dtype=complex)
    it = np.nditer(coeffs, flags=["multi_index"])
    for c in it:
        if c == 0:
            continue
        idx = it.multi_index
        outs, ins = idx[:n], idx[n:]
        S += complex(c) * la.kron_all(
            [assemblies[p].effect(outs[p], ins[p]) for p in range(n)]
        )
    return S


def _party_objective(
    coeffs: np.ndarray,
    rho: np.ndarray,
    dims: list[int],
    assemblies: list[MeasurementAssembly],
    party: int,
) -> list[list[np.ndarray]]:
    """G[x][a] with objective sum_{a,x} Tr(E_{a|x} G[x][a]) for one party."""
    n = len(assemblies)
    d = dims[party]
    G = [
        [np.zeros((d, d), dtype=complex) for _ in range(assemblies[party].outcomes)]
        for _ in range(assemblies[party].inputs)
    ]
    it = np.nditer(coeffs, flags=["multi_index"])
    for c in it:
        if c == 0:
            continue
        idx = it.multi_index
        outs, ins = idx[:n], idx[n:]
        ops = [
            np.eye(d) if q == party else assemblies[q].effect(outs[q], ins[q])
            for q in range(n)
        ]
        red = la.partial_trace(la.kron_all(ops) @ rho, dims, party)
        G[ins[party]][outs[party]] += complex(c) * red
    return G


@dataclass
class SeesawResult:
    value: float
    assemblies: list[MeasurementAssembly]
    network: Network
    trace: list[float] = field(default_factory=list)
    seed: int | None = None


def seesaw_once(
    expr: BellExpression,
    network: Network,
    assemblies: list[MeasurementAssembly],
    max_iters: int = 100,
    tol: float = DEFAULT_TOL.seesaw_convergence,
) -> SeesawResult:
    """Alternating maximization from a given starting configuration."""
    coeffs = expr.coefficients
    n = len(assemblies)
    prev = -np.inf
    trace = []
    for _ in range(max_iters):
        rho, slot_dims = network.output_state()
        pdims = network.party_dims
        for p in range(n):
            G = _party_objective(coeffs, rho, pdims, assemblies, p)
            assemblies[p] = MeasurementAssembly(
                [_update_binary_povm(g) for g in G], party=assemblies[p].party
            )
            # refresh the output state is not needed: rho does not depend on
            # the measurements.
        party = 0
        for slot, ch in enumerate(network.channels):
            n_out = 1 if ch is None else len(ch.d_out)
            if ch is not None:
                rho_rest, dims_rest = network.output_state(skip_slot=slot)
                S = bell_operator(coeffs, assemblies)
                W = choi_objective_matrix(
                    rho_rest, dims_rest, slot, S, int(np.prod(ch.d_out))
                )
                network.channels[slot] = _update_choi(W, ch.d_in, ch.d_out)
            party += n_out
        value = float(expr.evaluate(network.behaviour(assemblies)))
        trace.append(value)
        if abs(value - prev) < tol or value < prev:
            prev = max(prev, value)
            break
        prev = value
    return SeesawResult(prev, assemblies, network, trace)


def _random_start(
    state: DensityMatrix,
    source_dims: tuple[int, ...],
    broadcast_slots: dict[int, tuple[int, ...]],
    inputs: tuple[int, ...],
    rng: np.random.Generator,
) -> tuple[Network, list[MeasurementAssembly]]:
    channels: list[ChoiState | None] = []
    dims: list[int] = []
    for i, d in enumerate(source_dims):
        if i in broadcast_slots:
            channels.append(random_isometry_choi(d, broadcast_slots[i], rng))
            dims.extend(broadcast_slots[i])
        else:
            channels.append(None)
            dims.append(d)
    net = Network(state, source_dims, channels)
    if len(inputs) != len(dims):
        raise la.DimensionMismatchError("party count mismatch")
    assemblies = [
        random_projective_assembly(d, k, rng, party=f"P{p}")
        for p, (d, k) in enumerate(zip(dims, inputs))
    ]
    return net, assemblies


def seesaw_violation(
    expr: BellExpression,
    state: DensityMatrix,
    source_dims: tuple[int, ...],
    broadcast_slots: dict[int, tuple[int, ...]],
    restarts: int = 10,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = DEFAULT_TOL.seesaw_convergence,
    warm_start: SeesawResult | None = None,
    verbose: bool = False,
) -> SeesawResult:
    """Best see-saw value of `expr` over measurements and broadcast channels.

    `broadcast_slots` maps a source subsystem index to the output dims of
    the channel broadcasting it; other subsystems are measured directly.
    """
    rng = np.random.default_rng(seed)
    inputs = expr.scenario.inputs
    best: SeesawResult | None = None
    starts = []
    if warm_start is not None:
        net = Network(
            state,
            source_dims,
            [None if c is None else ChoiState(c.matrix.copy(), c.d_in, c.d_out)
             for c in warm_start.network.channels],
        )
        starts.append((net, [MeasurementAssembly(list(m.povms), party=m.party)
                             for m in warm_start.assemblies]))
    for _ in range(restarts):
        starts.append(_random_start(state, source_dims, broadcast_slots, inputs, rng))
    for i, (net, asm) in enumerate(starts):
        res = seesaw_once(expr, net, asm, max_iters, tol)
        res.seed = seed
        if verbose:
            print(f"start {i}: value = {res.value:.8f}")
        if best is None or res.value > best.value:
            best = res
    return best


# ---------------------------------------------------------------------------
# Threshold bisection


@dataclass
class ThresholdResult:
    threshold: float
    history: list[tuple[float, float]]
    best: SeesawResult | None = None


def bisect_threshold(
    problem_at,
    lo: float,
    hi: float,
    tol: float,
    restarts: int = 8,
    seed: int = 0,
    max_iters: int = 100,
    violation_eps: float = 1e-6,
    verbose: bool = False,
) -> ThresholdResult:
    """Smallest parameter value at which the see-saw still finds a violation.

    ``problem_at(param)`` returns ``(expr, state, source_dims,
    broadcast_slots, bound)``.  Assumes violation is monotone in the
    parameter; the see-saw configuration found on the violating side warm
    starts subsequent solves.  The returned threshold is an upper bound on
    the true critical parameter.
    """
    history: list[tuple[float, float]] = []
    warm: SeesawResult | None = None

    def violates(param, warm_start, n_restarts):
        expr, state, sdims, slots, bound = problem_at(param)
        res = seesaw_violation(
            expr, state, sdims, slots,
            restarts=n_restarts, seed=seed, max_iters=max_iters,
            warm_start=warm_start,
        )
        history.append((param, res.value))
        if verbose:
            print(f"param={param:.6f}: value={res.value:.8f} bound={bound:.6f}")
        return res.value > bound + violation_eps, res

    ok, res = violates(hi, None, restarts)
    if not ok:
        return ThresholdResult(float("inf"), history, res)
    warm = res
    best = res
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        ok, res = violates(mid, warm, max(2, restarts // 4))
        if ok:
            hi = mid
            warm = res
            best = res
        else:
            lo = mid
    return ThresholdResult(hi, history, best)


def critical_visibility(
    expr: BellExpression,
    state_at,
    source_dims: tuple[int, ...],
    broadcast_slots: dict[int, tuple[int, ...]],
    lo: float = 0.0,
    hi: float = 1.0,
    tol: float = DEFAULT_TOL.visibility_bisection,
    restarts: int = 8,
    seed: int = 0,
    verbose: bool = False,
) -> ThresholdResult:
    """Critical mixing weight below which the see-saw finds no violation."""
    bound = expr.broadcast_local_bound
    if bound is None:
        bound = expr.local_bound

    def problem_at(v):
        return expr, state_at(v), source_dims, broadcast_slots, bound

    return bisect_threshold(
        problem_at, lo, hi, tol, restarts=restarts, seed=seed, verbose=verbose
    )


# ---------------------------------------------------------------------------
# Detection efficiency


def efficiency_twisted_expression(
    expr: BellExpression, eta: float, fail_strategies, strict_paper: bool = False
) -> BellExpression:
    """Pull the detector-inefficiency map back onto the coefficients.

    The map p -> P^eta is affine in the ideal behaviour, so evaluating the
    expression on P^eta equals evaluating a twisted expression on p.
    """
    sc = expr.scenario
    zero = Behaviour(sc, np.zeros(sc.shape))
    base = apply_detector_inefficiency(zero, eta, fail_strategies, strict_paper, validate=False)
    offset = float(np.sum(expr.coefficients * base.table))
    coeffs = np.zeros(sc.shape)
    flat = coeffs.reshape(-1)
    table = np.zeros(sc.shape)
    tflat = table.reshape(-1)
    for j in range(tflat.size):
        tflat[j] = 1.0
        mapped = apply_detector_inefficiency(
            Behaviour(sc, table), eta, fail_strategies, strict_paper, validate=False
        )
        flat[j] = float(np.sum(expr.coefficients * mapped.table)) - offset
        tflat[j] = 0.0
    return BellExpression(
        sc,
        coeffs,
        constant=expr.constant + offset,
        name=f"{expr.name}@eta={eta:.6f}" if expr.name else "",
    )


def critical_efficiency(
    expr: BellExpression,
    state: DensityMatrix,
    source_dims: tuple[int, ...],
    broadcast_slots: dict[int, tuple[int, ...]],
    fail_strategies=None,
    lo: float = 0.0,
    hi: float = 1.0,
    tol: float = DEFAULT_TOL.efficiency_bisection,
    restarts: int = 8,
    seed: int = 0,
    strict_paper: bool = False,
    verbose: bool = False,
) -> ThresholdResult:
    """Critical detector efficiency for one fail strategy (or the best over
    all of them when ``fail_strategies`` is None)."""
    bound = expr.broadcast_local_bound
    if bound is None:
        bound = expr.local_bound
    if fail_strategies == "all":
        candidates = list(all_fail_strategies(expr.scenario))
    elif fail_strategies is None:
        # Input-independent fail outputs; one candidate per sign pattern.
        candidates = [
            [[sign] * k for sign, k in zip(pattern, expr.scenario.inputs)]
            for pattern in itertools.product((-1, 1), repeat=expr.scenario.parties)
        ]
    else:
        candidates = [fail_strategies]
    best: ThresholdResult | None = None
    for fs in candidates:
        def problem_at(eta, fs=fs):
            twisted = efficiency_twisted_expression(expr, eta, fs, strict_paper)
            return twisted, state, source_dims, broadcast_slots, bound

        res = bisect_threshold(
            problem_at, lo, hi, tol, restarts=restarts, seed=seed, verbose=verbose
        )
        if verbose:
            print(f"fail strategy {fs}: eta_c = {res.threshold:.6f}")
        if best is None or res.threshold < best.threshold:
            best = res
    return best


# ---------------------------------------------------------------------------
# NS2 activation search


@dataclass
class ActivationPoint:
    alpha: float
    chi: float
    lhv_condition: bool
    value: float
    violated: bool


def activation_scan(
    chi_values,
    alpha_margin: float = 1e-6,
    restarts: int = 12,
    seed: int = 0,
    verbose: bool = False,
):
    """Scan the POVM-local family for NS2-bilocality violations.

    For each chi, take the largest alpha still satisfying the projective
    LHV condition of the POVM-local family and see-saw the 11-term
    bilocality inequality on the broadcast version of that state.
    """
    from scipy.optimize import brentq

    expr = ns2_inequality_16()
    points = []
    for chi in chi_values:
        f = lambda a: np.cos(2 * chi) ** 2 - (2 * a - 1) / ((2 - a) * a**3)
        if f(1.0) >= 0:
            alpha = 1.0
        else:
            alpha = brentq(f, 0.5, 1.0) - alpha_margin
        state = rho_povm_family(alpha, chi)
        ok = povm_lhv_condition(alpha, chi)
        res = seesaw_violation(
            expr, state, (2, 2), {1: (2, 2)}, restarts=restarts, seed=seed
        )
        pt = ActivationPoint(alpha, chi, ok, res.value, res.value > 4.0 + 1e-3)
        if verbose:
            print(
                f"chi={chi:.4f} alpha={alpha:.4f} lhv={ok} "
                f"value={res.value:.6f} violated={pt.violated}"
            )
        points.append(pt)
    return points


# ---------------------------------------------------------------------------
# Visibility-robustness see-saw (LP membership + witness maximization)


@dataclass
class VisibilitySeesawResult:
    v_star: float
    witness: BellExpression
    assemblies: list[MeasurementAssembly]
    network: Network
    trace: list[float] = field(default_factory=list)
    seed: int | None = None

    def ideal_behaviour(self, state: DensityMatrix) -> Behaviour:
        net = Network(state, self.network.source_dims, self.network.channels)
        return net.behaviour(self.assemblies)


def visibility_robustness_seesaw(
    state_at,
    scenario: Scenario,
    source_dims: tuple[int, ...],
    broadcast_slots: dict[int, tuple[int, ...]],
    groups,
    restarts: int = 10,
    seed: int = 0,
    max_outer: int = 40,
    kicks: int = 1,
    tol: float = DEFAULT_TOL.seesaw_convergence,
    use_cache: bool = True,
    warm_start: SeesawResult | None = None,
    verbose: bool = False,
) -> VisibilitySeesawResult:
    """Minimize the visibility at which the behaviour leaves the
    broadcast-local polytope.

    ``state_at(v)`` returns the source state at mixing weight v.  The
    outer loop alternates the membership LP (yielding v* and a witness
    from its duals) with a see-saw maximizing that witness.
    """
    from .polytopes import broadcast_local_visibility

    rng = np.random.default_rng(seed)
    best: VisibilitySeesawResult | None = None
    b_target_state = state_at(1.0)
    b_noise_state = state_at(0.0)
    starts = []
    if warm_start is not None:
        starts.append(
            (
                Network(
                    b_target_state,
                    source_dims,
                    [None if c is None else ChoiState(c.matrix.copy(), c.d_in, c.d_out)
                     for c in warm_start.network.channels],
                ),
                [MeasurementAssembly(list(m.povms), party=m.party)
                 for m in warm_start.assemblies],
            )
        )
    for _ in range(restarts):
        starts.append(
            _random_start(b_target_state, source_dims, broadcast_slots, scenario.inputs, rng)
        )
    for r, (net, assemblies) in enumerate(starts):
        v_prev = 2.0
        kicks_left = kicks
        best_here: VisibilitySeesawResult | None = None
        trace: list[float] = []
        for _ in range(max_outer):
            b1 = Network(b_target_state, source_dims, net.channels).behaviour(assemblies)
            b0 = Network(b_noise_state, source_dims, net.channels).behaviour(assemblies)
            v_star, witness = broadcast_local_visibility(b1, b0, groups, use_cache)
            trace.append(v_star)
            if best_here is None or v_star < best_here.v_star:
                best_here = VisibilitySeesawResult(
                    v_star,
                    witness,
                    [MeasurementAssembly(list(m.povms), party=m.party) for m in assemblies],
                    Network(b_target_state, source_dims, list(net.channels)),
                    trace,
                    seed,
                )
            stalled = v_star >= 4.0 - 1e-6 or abs(v_star - v_prev) < tol
            if stalled:
                if kicks_left <= 0:
                    break
                kicks_left -= 1
                for slot, ch in enumerate(net.channels):
                    if ch is None:
                        continue
                    kick = random_isometry_choi(ch.d_in, ch.d_out, rng)
                    net.channels[slot] = ChoiState(
                        0.7 * ch.matrix + 0.3 * kick.matrix, ch.d_in, ch.d_out
                    )
                v_prev = 2.0
                continue
            v_prev = v_star
            v_state = min(v_star, 1.0)
            inner = seesaw_once(
                witness,
                Network(state_at(v_state), source_dims, net.channels),
                assemblies,
                max_iters=60,
                tol=tol,
            )
            assemblies = inner.assemblies
            net = inner.network
        if verbose:
            print(f"restart {r}: v* = {best_here.v_star:.6f}")
        if best is None or best_here.v_star < best.v_star:
            best = best_here
    return best


# ---------------------------------------------------------------------------
# Efficiency crossing of a fixed behaviour


def efficiency_crossing(
    expr: BellExpression,
    behaviour: Behaviour,
    fail_strategies=None,
    strict_paper: bool = False,
) -> tuple[float, list]:
    """Largest eta at which the detector-degraded behaviour saturates the
    broadcast-local bound of ``expr`` (its value is positive just above).

    Returns (eta_c, fail_strategy); minimizes over the given strategies
    (input-independent patterns when None, all patterns when "all").
    """
    from scipy.optimize import brentq

    bound = expr.broadcast_local_bound
    if bound is None:
        bound = expr.local_bound
    sc = expr.scenario
    if fail_strategies == "all":
        candidates = list(all_fail_strategies(sc))
    elif fail_strategies is None:
        candidates = [
            [[sign] * k for sign, k in zip(pattern, sc.inputs)]
            for pattern in itertools.product((-1, 1), repeat=sc.parties)
        ]
    else:
        candidates = [fail_strategies]
    best = (float("inf"), None)
    for fs in candidates:
        def margin(eta, fs=fs):
            noisy = apply_detector_inefficiency(behaviour, eta, fs, strict_paper)
            return expr.evaluate(noisy) - bound

        if margin(1.0) <= 1e-12:
            continue
        # scan down for a sign change, then refine the largest root
        etas = np.linspace(1.0, 0.0, 201)
        prev_eta, prev_val = 1.0, margin(1.0)
        root = None
        for eta in etas[1:]:
            val = margin(eta)
            if val <= 0.0:
                root = brentq(margin, eta, prev_eta)
                break
            prev_eta, prev_val = eta, val
        if root is None:
            root = 0.0
        if root < best[0]:
            best = (root, fs)
    return best
