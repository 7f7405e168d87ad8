"""Device-independent entanglement certification from moment matrices.

For a four-party behaviour produced by two broadcast channels acting on a
bipartite source, separability of the source across the AB|CD cut implies
the existence of a positive-semidefinite completion of a level-1 moment
matrix whose partial transpose (an index swap on the AB monomial factor)
is also positive semidefinite.  Infeasibility of that completion problem
certifies source entanglement, and the SDP dual yields a linear witness
on the behaviour.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .behaviours import Behaviour, BellExpression, Scenario, binary_scenario
from .config import DEFAULT_TOL
from .quantum import DensityMatrix, isotropic_state
from .solvers import SolverFailure, solve_cvxpy

# Per-party operator in a monomial: None for the identity, or an input
# index for the projector onto outcome index 0 of that input (the other
# outcome's effect is eliminated by completeness).
PartyOp = int | None
Monomial = tuple[PartyOp, ...]
# Per-party reduced word of an entry E_i^dagger E_j: 0, 1 or 2 projector
# input labels (adjacent repeats collapse by projectivity).
Word = tuple[int, ...]
ClassKey = tuple[Word, ...]


def _entry_key(mi: Monomial, mj: Monomial) -> ClassKey:
    """Canonical class key of the Gamma entry for monomials (mi, mj).

    Operators of distinct parties commute, so the product factorizes into
    one word per party.  Projectivity collapses repeated adjacent labels,
    and Hermiticity of Gamma (real embedding) identifies a key with its
    party-wise reversal.
    """
    words = []
    for oi, oj in zip(mi, mj):
        w = tuple(o for o in (oi, oj) if o is not None)
        if len(w) == 2 and w[0] == w[1]:
            w = w[:1]
        words.append(w)
    key = tuple(words)
    rev = tuple(w[::-1] for w in words)
    return min(key, rev)


def _is_probability_key(key: ClassKey) -> bool:
    return all(len(w) <= 1 for w in key)


@dataclass
class MomentStructure:
    """Index structure of the level-1 moment matrix for one scenario."""

    scenario: Scenario
    monomials: list[Monomial]
    classes: list[ClassKey]
    basis: list[np.ndarray]  # symmetric 0/1 indicator matrix per class
    prob_classes: list[int]  # indices into `classes` with per-party words <= 1
    free_classes: list[int]
    ppt_perm: np.ndarray  # entry-permutation implementing the AB|CD swap

    @property
    def size(self) -> int:
        return len(self.monomials)

    def ppt(self, m: np.ndarray) -> np.ndarray:
        """Partial transpose on the AB monomial factor (involutive)."""
        n = self.size
        return m.ravel()[self.ppt_perm].reshape(n, n)

    def probability_value(self, b: Behaviour, key: ClassKey) -> float:
        """Value of a probability-class entry on a behaviour.

        The entry is the joint probability that every party with a length-1
        word outputs outcome index 0 at the word's input; parties with empty
        words are marginalized with their inputs averaged (exact for
        non-signalling behaviours, matching the correlator conventions).
        """
        n = self.scenario.parties
        fixed = {p: w[0] for p, w in enumerate(key) if w}
        if not fixed:
            return 1.0
        total = 0.0
        count = 0
        free = [p for p in range(n) if p not in fixed]
        for xs_free in itertools.product(*[range(self.scenario.inputs[p]) for p in free]):
            xs = [0] * n
            for p, x in fixed.items():
                xs[p] = x
            for p, x in zip(free, xs_free):
                xs[p] = x
            sub = b.table[(Ellipsis,) + tuple(xs)]
            for p in range(n):
                if p in fixed:
                    sub = np.take(sub, 0, axis=0)
                else:
                    sub = sub.sum(axis=0)
            total += float(sub)
            count += 1
        return total / count


@lru_cache(maxsize=8)
def _structure_cache(inputs: tuple[int, ...]) -> MomentStructure:
    scenario = binary_scenario(*inputs)
    n = scenario.parties
    if n != 4:
        raise ValueError("moment structure is defined for four-party scenarios")
    options = [[None] + list(range(m)) for m in inputs]
    monomials: list[Monomial] = [tuple(mon) for mon in itertools.product(*options)]
    size = len(monomials)

    class_of: dict[ClassKey, int] = {}
    entries: list[list[tuple[int, int]]] = []
    for i in range(size):
        for j in range(i, size):
            key = _entry_key(monomials[i], monomials[j])
            c = class_of.get(key)
            if c is None:
                c = len(entries)
                class_of[key] = c
                entries.append([])
            entries[c].append((i, j))
    classes = list(class_of)
    basis = []
    for cells in entries:
        m = np.zeros((size, size))
        for i, j in cells:
            m[i, j] = 1.0
            m[j, i] = 1.0
        basis.append(m)
    prob_classes = [c for c, key in enumerate(classes) if _is_probability_key(key)]
    free_classes = [c for c, key in enumerate(classes) if not _is_probability_key(key)]

    # AB|CD swap: with monomial index factored as (AB block, CD block),
    # transpose the AB factor only.
    g = (1 + inputs[0]) * (1 + inputs[1])
    h = (1 + inputs[2]) * (1 + inputs[3])
    idx = np.arange(size * size).reshape(g, h, g, h)
    ppt_perm = idx.transpose(2, 1, 0, 3).ravel()
    return MomentStructure(
        scenario, monomials, classes, basis, prob_classes, free_classes, ppt_perm
    )


def build_moment_structure(inputs: tuple[int, ...]) -> MomentStructure:
    """Level-1 moment-matrix skeleton for a binary four-party scenario."""
    return _structure_cache(tuple(int(m) for m in inputs))


@dataclass
class MomentWitness:
    """Linear functional on probability-class entries, nonnegative on all
    behaviours admitting a PPT moment-matrix completion."""

    scenario: Scenario
    entries: dict[ClassKey, float]
    bound: float = 0.0

    def evaluate(self, b: Behaviour) -> float:
        ms = build_moment_structure(self.scenario.inputs)
        return sum(w * ms.probability_value(b, key) for key, w in self.entries.items())

    def to_expression(self) -> BellExpression:
        """Equivalent full-probability coefficient tensor (exact on
        non-signalling behaviours, where marginal input averaging is exact)."""
        sc = self.scenario
        n = sc.parties
        coeffs = np.zeros(sc.shape)
        constant = 0.0
        for key, w in self.entries.items():
            fixed = {p: word[0] for p, word in enumerate(key) if word}
            if not fixed:
                constant += w
                continue
            free = [p for p in range(n) if p not in fixed]
            spread = w / float(np.prod([sc.inputs[p] for p in free])) if free else w
            out_ranges = [range(1) if p in fixed else range(2) for p in range(n)]
            for outs in itertools.product(*out_ranges):
                for xs_free in itertools.product(*[range(sc.inputs[p]) for p in free]):
                    xs = [0] * n
                    for p, x in fixed.items():
                        xs[p] = x
                    for p, x in zip(free, xs_free):
                        xs[p] = x
                    coeffs[tuple(outs) + tuple(xs)] += spread
        return BellExpression(sc, coeffs, constant=constant, name="moment-witness")


@dataclass
class CertificationResult:
    certified: bool
    margin: float  # optimal t of max t s.t. Gamma - tI, PPT(Gamma) - tI >= 0
    witness: MomentWitness | None


def certify_entanglement(
    b: Behaviour, tol: float = 1e-6, verbose: bool = False
) -> CertificationResult:
    """Test a four-party behaviour for membership in the level-1 PPT moment
    relaxation of separable-source models across AB|CD.

    Maximizes t such that some completion satisfies Gamma >= tI and
    PPT(Gamma) >= tI.  t >= -tol means a (near-)feasible completion exists:
    inconclusive.  t < -tol certifies that no separable source across AB|CD
    can produce the behaviour; the SDP dual provides a witness that is
    nonnegative on every behaviour with a feasible completion.
    """
    import cvxpy as cp

    ms = build_moment_structure(b.scenario.inputs)
    const = np.zeros((ms.size, ms.size))
    for c in ms.prob_classes:
        const += ms.probability_value(b, ms.classes[c]) * ms.basis[c]

    y = cp.Variable(len(ms.free_classes))
    t = cp.Variable()
    gamma = const + sum(yv * ms.basis[c] for yv, c in zip(y, ms.free_classes))
    gamma_pt = ms.ppt(const) + sum(
        yv * ms.ppt(ms.basis[c]) for yv, c in zip(y, ms.free_classes)
    )
    eye = np.eye(ms.size)
    lmi = gamma - t * eye >> 0
    lmi_pt = gamma_pt - t * eye >> 0
    problem = cp.Problem(cp.Maximize(t), [lmi, lmi_pt, t <= 1.0])
    status = solve_cvxpy(problem)
    if status != "optimal" or t.value is None:
        raise SolverFailure("moment-matrix SDP returned no solution")
    margin = float(t.value)
    if margin >= -tol:
        return CertificationResult(False, margin, None)

    z1 = np.asarray(lmi.dual_value)
    z2 = np.asarray(lmi_pt.dual_value)
    entries = {}
    for c in ms.prob_classes:
        w = float(np.sum(z1 * ms.basis[c]) + np.sum(z2 * ms.ppt(ms.basis[c])))
        entries[ms.classes[c]] = w
    scale = max(abs(w) for w in entries.values())
    if scale > 0:
        entries = {k: w / scale for k, w in entries.items()}
    witness = MomentWitness(b.scenario, entries)
    return CertificationResult(True, margin, witness)


def max_feasible_visibility(
    behaviour_at,
    scenario: Scenario,
    tol: float = 1e-7,
    verbose: bool = False,
) -> float:
    """Largest alpha in [0, 1] for which the behaviour of an affine family
    alpha -> behaviour admits a PPT moment-matrix completion.

    `behaviour_at` maps a visibility to a Behaviour and must be affine in
    its argument (mixtures of a fixed strategy applied to an affine state
    family are).  Above the returned value the source entanglement is
    certified device-independently.
    """
    import cvxpy as cp

    ms = build_moment_structure(scenario.inputs)
    b1 = behaviour_at(1.0)
    b0 = behaviour_at(0.0)
    v1 = {c: ms.probability_value(b1, ms.classes[c]) for c in ms.prob_classes}
    v0 = {c: ms.probability_value(b0, ms.classes[c]) for c in ms.prob_classes}

    alpha = cp.Variable()
    y = cp.Variable(len(ms.free_classes))
    gamma = sum(
        (alpha * v1[c] + (1 - alpha) * v0[c]) * ms.basis[c] for c in ms.prob_classes
    )
    gamma = gamma + sum(yv * ms.basis[c] for yv, c in zip(y, ms.free_classes))
    gamma_pt = sum(
        (alpha * v1[c] + (1 - alpha) * v0[c]) * ms.ppt(ms.basis[c])
        for c in ms.prob_classes
    )
    gamma_pt = gamma_pt + sum(
        yv * ms.ppt(ms.basis[c]) for yv, c in zip(y, ms.free_classes)
    )
    problem = cp.Problem(
        cp.Maximize(alpha), [gamma >> 0, gamma_pt >> 0, alpha >= 0.0, alpha <= 1.0]
    )
    status = solve_cvxpy(problem)
    if status == "infeasible":
        return 0.0
    if status != "optimal" or alpha.value is None:
        raise SolverFailure("visibility SDP returned no solution")
    return float(alpha.value)


@dataclass
class AlphaSearchResult:
    alpha: float
    witness: MomentWitness | None
    network: "object"
    assemblies: list
    trace: list[float] = field(default_factory=list)
    converged: bool = False


def heuristic_alpha_search(
    settings: int = 2,
    restarts: int = 4,
    seed: int = 0,
    max_rounds: int = 12,
    seesaw_restarts: int = 4,
    tol: float = 1e-4,
    verbose: bool = False,
) -> AlphaSearchResult:
    """Heuristic minimization of the certifiable visibility threshold.

    Alternates between (a) the SDP computing the largest visibility alpha*
    at which the current strategy's behaviour still admits a PPT
    moment-matrix completion, and (b) extracting a witness just above
    alpha* and re-optimizing the strategy (measurements and both broadcast
    channels) against it by see-saw.  alpha* is non-increasing; stops when
    two successive values differ by less than `tol`.
    """
    from .behaviours import chsh_expression, lift_to_four_party
    from .seesaw import Network, SeesawResult, seesaw_violation

    inputs = (settings,) * 4
    scenario = binary_scenario(*inputs)
    slots = {0: (2, 2), 1: (2, 2)}
    rng = np.random.default_rng(seed)

    def family(network: Network, assemblies) -> "callable":
        def behaviour_at(a: float) -> Behaviour:
            net = Network(isotropic_state(a), network.source_dims, list(network.channels))
            return net.behaviour(assemblies)

        return behaviour_at

    best: AlphaSearchResult | None = None
    for r in range(restarts):
        # Seed the strategy with the best violation of the four-party CHSH
        # lift (restart 0) or a plain random start.
        if settings >= 2 and r == 0:
            expr0 = lift_to_four_party(chsh_expression())
        else:
            coeffs = rng.normal(size=scenario.shape)
            expr0 = BellExpression(scenario, coeffs, name="random-start")
        res = seesaw_violation(
            expr0,
            isotropic_state(1.0),
            (2, 2),
            slots,
            restarts=seesaw_restarts,
            seed=int(rng.integers(1 << 30)),
        )
        network, assemblies = res.network, res.assemblies
        trace: list[float] = []
        witness: MomentWitness | None = None
        converged = False
        alpha = 1.0
        for _ in range(max_rounds):
            alpha_new = max_feasible_visibility(family(network, assemblies), scenario)
            if verbose:
                print(f"restart {r}: alpha* = {alpha_new:.6f}")
            trace.append(alpha_new)
            if alpha_new >= alpha - tol and witness is not None:
                converged = True
                alpha = min(alpha, alpha_new)
                break
            alpha = min(alpha, alpha_new)
            probe = min(1.0, alpha + 0.01)
            cert = certify_entanglement(family(network, assemblies)(probe))
            if not cert.certified or cert.witness is None:
                break
            witness = cert.witness
            # Strategy step: make the witness as negative as possible at a
            # visibility just below the current threshold.
            target = BellExpression(
                scenario, -witness.to_expression().coefficients, name="witness-seesaw"
            )
            res = seesaw_violation(
                target,
                isotropic_state(max(alpha - 0.02, 0.0)),
                (2, 2),
                slots,
                restarts=seesaw_restarts,
                seed=int(rng.integers(1 << 30)),
                warm_start=SeesawResult(0.0, assemblies, network),
            )
            network, assemblies = res.network, res.assemblies
        cand = AlphaSearchResult(alpha, witness, network, assemblies, trace, converged)
        if best is None or cand.alpha < best.alpha:
            best = cand
        if verbose:
            print(f"restart {r}: final alpha* = {cand.alpha:.6f}")
    assert best is not None
    return best
