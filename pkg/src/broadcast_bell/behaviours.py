"""Probability tables, correlators, Bell expressions and transforms.

Conventions
-----------
* A behaviour over an N-party scenario is stored as a dense tensor of
  shape ``(*outputs, *inputs)`` (outputs-major, inputs-minor):
  ``table[a, b, ..., x, y, ...] = p(ab...|xy...)``.
* Binary outcomes are labelled +1/-1 externally; internally +1 maps to
  index 0 and -1 to index 1.
* A Bell expression is a real coefficient tensor of the same shape plus
  a constant offset, with optional correlator-form metadata used by the
  lifting constructions.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import DEFAULT_TOL

# A correlator term is a tuple of (party, input) pairs, sorted by party.
CorrelatorTerm = tuple[tuple[int, int], ...]


def outcome_sign(index: int) -> int:
    """Outcome index -> +-1 label (+1 is index 0)."""
    return 1 - 2 * index


@dataclass(frozen=True)
class Scenario:
    """Number of inputs and outputs for each party."""

    inputs: tuple[int, ...]
    outputs: tuple[int, ...]

    def __post_init__(self):
        if len(self.inputs) != len(self.outputs):
            raise ValueError("inputs and outputs must have one entry per party")
        if any(n < 1 for n in self.inputs + self.outputs):
            raise ValueError("all counts must be >= 1")
        object.__setattr__(self, "inputs", tuple(int(n) for n in self.inputs))
        object.__setattr__(self, "outputs", tuple(int(n) for n in self.outputs))

    @property
    def parties(self) -> int:
        return len(self.inputs)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.outputs + self.inputs

    def is_binary(self) -> bool:
        return all(o == 2 for o in self.outputs)

    def subscenario(self, parties: Sequence[int]) -> "Scenario":
        return Scenario(
            tuple(self.inputs[p] for p in parties),
            tuple(self.outputs[p] for p in parties),
        )


def binary_scenario(*inputs: int) -> Scenario:
    return Scenario(tuple(inputs), (2,) * len(inputs))


@dataclass
class Behaviour:
    scenario: Scenario
    table: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=float)
        if self.table.shape != self.scenario.shape:
            raise ValueError(
                f"table shape {self.table.shape} != scenario shape {self.scenario.shape}"
            )

    def validate(self, tol: float = DEFAULT_TOL.trace, require_ns: bool = False) -> "Behaviour":
        if self.table.min() < -1e-12:
            raise ValueError(f"negative probability {self.table.min():.3e}")
        n = self.scenario.parties
        sums = self.table.sum(axis=tuple(range(n)))
        if np.max(np.abs(sums - 1.0)) > max(tol, 1e-10):
            raise ValueError("outcome sums differ from 1")
        if require_ns and not self.is_nonsignalling():
            raise ValueError("behaviour is signalling")
        return self

    def is_nonsignalling(self, tol: float = 1e-10) -> bool:
        n = self.scenario.parties
        for p in range(n):
            # Marginal on all parties but p must not depend on input of p.
            marg = self.table.sum(axis=p)  # sum over outcome of p
            ax = (n - 1) + p  # input axis of p after removing one outcome axis
            ref = np.take(marg, 0, axis=ax)
            for x in range(1, self.scenario.inputs[p]):
                if np.max(np.abs(np.take(marg, x, axis=ax) - ref)) > tol:
                    return False
        return True

    def marginal(self, parties: Sequence[int]) -> "Behaviour":
        """NS marginal over a subset of parties (other inputs averaged)."""
        parties = sorted(parties)
        n = self.scenario.parties
        others = [p for p in range(n) if p not in parties]
        t = self.table.sum(axis=tuple(others))  # sum their outcomes
        # remaining axes: outcomes of kept parties, then all inputs
        t = t.mean(axis=tuple(len(parties) + o for o in others))
        return Behaviour(self.scenario.subscenario(parties), t)

    def mix(self, other: "Behaviour", weight: float) -> "Behaviour":
        if other.scenario != self.scenario:
            raise ValueError("scenario mismatch")
        return Behaviour(self.scenario, weight * self.table + (1 - weight) * other.table)

    def to_json(self) -> str:
        return json.dumps(
            {
                "inputs": list(self.scenario.inputs),
                "outputs": list(self.scenario.outputs),
                "layout": "outputs-major, inputs-minor",
                "table": self.table.ravel().tolist(),
            }
        )

    @staticmethod
    def from_json(text: str) -> "Behaviour":
        d = json.loads(text)
        sc = Scenario(tuple(d["inputs"]), tuple(d["outputs"]))
        return Behaviour(sc, np.asarray(d["table"], dtype=float).reshape(sc.shape))


def uniform_behaviour(scenario: Scenario) -> Behaviour:
    t = np.ones(scenario.shape)
    t /= float(np.prod(scenario.outputs))
    return Behaviour(scenario, t)


def deterministic_behaviour(scenario: Scenario, outcome_maps: Sequence[Sequence[int]]) -> Behaviour:
    """Product deterministic behaviour; outcome_maps[p][x] is party p's outcome index."""
    t = np.zeros(scenario.shape)
    for xs in itertools.product(*[range(n) for n in scenario.inputs]):
        outs = tuple(outcome_maps[p][xs[p]] for p in range(scenario.parties))
        t[outs + xs] = 1.0
    return Behaviour(scenario, t)


def correlator(b: Behaviour, parties: Sequence[int], inputs: Sequence[int]) -> float:
    """<prod_p O_p> for +-1 outcomes of the named parties at the given inputs."""
    if any(b.scenario.outputs[p] != 2 for p in parties):
        raise ValueError("correlators require binary-outcome parties")
    pairs = sorted(zip(parties, inputs))
    parties = [p for p, _ in pairs]
    inputs = [x for _, x in pairs]
    marg = b.marginal(parties)
    t = marg.table[(Ellipsis,) + tuple(inputs)]
    signs = np.ones(())
    for _ in parties:
        signs = np.multiply.outer(signs, np.array([1.0, -1.0]))
    return float(np.sum(signs * t))


@dataclass
class BellExpression:
    scenario: Scenario
    coefficients: np.ndarray
    constant: float = 0.0
    correlator_terms: dict[CorrelatorTerm, float] | None = None
    local_bound: float | None = None
    broadcast_local_bound: float | None = None
    name: str = ""
    # Exact path used by the bound computations: coefficients equal
    # coefficients_scaled / coeff_denominator with the scaled tensor
    # holding exactly representable (typically integer) entries.
    coefficients_scaled: np.ndarray | None = None
    coeff_denominator: float = 1.0

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != self.scenario.shape:
            raise ValueError("coefficient tensor shape mismatch")

    def evaluate(self, b: Behaviour) -> float:
        if b.scenario != self.scenario:
            raise ValueError("scenario mismatch")
        return float(np.sum(self.coefficients * b.table)) + self.constant

    def to_json(self) -> str:
        d = {
            "inputs": list(self.scenario.inputs),
            "outputs": list(self.scenario.outputs),
            "layout": "outputs-major, inputs-minor",
            "coefficients": self.coefficients.ravel().tolist(),
            "constant": self.constant,
            "name": self.name,
            "local_bound": self.local_bound,
            "broadcast_local_bound": self.broadcast_local_bound,
        }
        if self.correlator_terms is not None:
            d["correlator_terms"] = [
                {"term": [list(pi) for pi in term], "weight": w}
                for term, w in self.correlator_terms.items()
            ]
        return json.dumps(d)

    @staticmethod
    def from_json(text: str) -> "BellExpression":
        d = json.loads(text)
        sc = Scenario(tuple(d["inputs"]), tuple(d["outputs"]))
        terms = None
        if "correlator_terms" in d:
            terms = {
                tuple(tuple(pi) for pi in item["term"]): float(item["weight"])
                for item in d["correlator_terms"]
            }
        return BellExpression(
            sc,
            np.asarray(d["coefficients"], dtype=float).reshape(sc.shape),
            constant=float(d.get("constant", 0.0)),
            correlator_terms=terms,
            local_bound=d.get("local_bound"),
            broadcast_local_bound=d.get("broadcast_local_bound"),
            name=d.get("name", ""),
        )


def expression_from_correlators(
    scenario: Scenario,
    terms: Mapping[CorrelatorTerm, float],
    constant: float = 0.0,
    name: str = "",
) -> BellExpression:
    """Build the full-probability coefficient tensor of a correlator expression.

    Each term is a tuple of (party, input) pairs; an empty tuple is a
    constant contribution.  Parties absent from a term have their inputs
    averaged uniformly, which is exact on non-signalling behaviours.
    """
    if not scenario.is_binary():
        raise ValueError("correlator expressions require binary outcomes")
    n = scenario.parties
    denom = float(np.prod(scenario.inputs))
    scaled = np.zeros(scenario.shape)
    const = constant
    norm_terms: dict[CorrelatorTerm, float] = {}
    for term, w in terms.items():
        term = tuple(sorted(term))
        if len(set(p for p, _ in term)) != len(term):
            raise ValueError(f"repeated party in term {term}")
        norm_terms[term] = norm_terms.get(term, 0.0) + float(w)
        if not term:
            const += w
            continue
        fixed = {p: x for p, x in term}
        free = [p for p in range(n) if p not in fixed]
        # spread = w / prod(free inputs); scaled by the full input product
        # this is w * prod(fixed inputs), exact for integer weights.
        spread_scaled = w * float(np.prod([scenario.inputs[p] for p in fixed]))
        for outs in itertools.product(*[range(2) for _ in range(n)]):
            sign = 1
            for p in fixed:
                sign *= outcome_sign(outs[p])
            for xs_free in itertools.product(*[range(scenario.inputs[p]) for p in free]):
                xs = [0] * n
                for p, x in fixed.items():
                    xs[p] = x
                for p, x in zip(free, xs_free):
                    xs[p] = x
                scaled[outs + tuple(xs)] += sign * spread_scaled
    return BellExpression(
        scenario,
        scaled / denom,
        constant=const,
        correlator_terms=norm_terms,
        name=name,
        coefficients_scaled=scaled,
        coeff_denominator=denom,
    )


def _marginal_parties(expr: BellExpression) -> set[int]:
    """Parties appearing in 1-body correlator terms."""
    if expr.correlator_terms is None:
        raise ValueError("expression has no correlator-form metadata")
    return {term[0][0] for term in expr.correlator_terms if len(term) == 1}


# ---------------------------------------------------------------------------
# Named expressions


def chsh_expression() -> BellExpression:
    sc = binary_scenario(2, 2)
    terms = {
        ((0, 0), (1, 0)): 1.0,
        ((0, 0), (1, 1)): 1.0,
        ((0, 1), (1, 0)): 1.0,
        ((0, 1), (1, 1)): -1.0,
    }
    expr = expression_from_correlators(sc, terms, name="CHSH")
    expr.local_bound = 2.0
    return expr


def chained_expression(n: int) -> BellExpression:
    """Chained Bell inequality with n inputs per party."""
    if n < 2:
        raise ValueError("chained inequality needs n >= 2")
    sc = binary_scenario(n, n)
    terms: dict[CorrelatorTerm, float] = {}
    for i in range(n):
        terms[((0, i), (1, i))] = 1.0
        if i < n - 1:
            terms[((0, i + 1), (1, i))] = 1.0
        else:
            terms[((0, 0), (1, n - 1))] = -1.0
    expr = expression_from_correlators(sc, terms, name=f"chained-{n}")
    expr.local_bound = 2.0 * n - 2.0
    return expr


def elegant_expression() -> BellExpression:
    """Elegant Bell inequality: 3 inputs for Alice, 4 for Bob, local bound 6."""
    sc = binary_scenario(3, 4)
    signs = [
        [1, 1, -1, -1],
        [1, -1, 1, -1],
        [1, -1, -1, 1],
    ]
    terms = {((0, i), (1, j)): float(signs[i][j]) for i in range(3) for j in range(4)}
    expr = expression_from_correlators(sc, terms, name="elegant")
    expr.local_bound = 6.0
    return expr


def ns2_inequality_16() -> BellExpression:
    """11-term NS2-bilocal inequality (bound 4) used for the activation search."""
    sc = binary_scenario(2, 2, 2)
    terms = {
        ((2, 0),): -2.0,
        ((0, 1), (1, 0)): 1.0,
        ((0, 0), (1, 1)): 1.0,
        ((0, 0), (1, 0)): -1.0,
        ((0, 1), (1, 1)): -1.0,
        ((0, 1), (2, 1)): 2.0,
        ((1, 1), (2, 1)): 2.0,
        ((0, 1), (1, 0), (2, 0)): 1.0,
        ((0, 0), (1, 0), (2, 0)): -1.0,
        ((0, 0), (1, 1), (2, 0)): 1.0,
        ((0, 1), (1, 1), (2, 0)): 1.0,
    }
    expr = expression_from_correlators(sc, terms, name="NS2-ineq-16")
    expr.broadcast_local_bound = 4.0
    return expr


# ---------------------------------------------------------------------------
# Lifting constructions


def lift_to_broadcast(expr: BellExpression) -> BellExpression:
    """Promote a bipartite two-outcome inequality to the tripartite broadcast
    scenario: <I[A,C](B0+B1)> + L<A_{m+1}(B1-B0)> with bound 2L.

    The original Bob plays the role of Charlie; the broadcast pair is (B, C).
    Valid only if the input has no 1-body Alice terms.
    """
    if expr.scenario.parties != 2 or not expr.scenario.is_binary():
        raise ValueError("lifting requires a binary-outcome bipartite expression")
    if expr.correlator_terms is None:
        raise ValueError("lifting requires correlator-form metadata")
    if 0 in _marginal_parties(expr):
        raise ValueError("expression has Alice 1-body terms; lifting ansatz invalid")
    if expr.local_bound is None:
        from .polytopes import local_bound

        expr.local_bound = local_bound(expr)
    L = expr.local_bound
    m_plus_1 = expr.scenario.inputs[0]
    sc = binary_scenario(m_plus_1 + 1, 2, expr.scenario.inputs[1])
    terms: dict[CorrelatorTerm, float] = {}

    def add(term: CorrelatorTerm, w: float):
        term = tuple(sorted(term))
        terms[term] = terms.get(term, 0.0) + w

    for term, w in expr.correlator_terms.items():
        d = dict(term)
        for yb in (0, 1):
            new = []
            if 0 in d:
                new.append((0, d[0]))
            new.append((1, yb))
            if 1 in d:
                new.append((2, d[1]))
            add(tuple(new), w)
    add(((0, m_plus_1), (1, 1)), L)
    add(((0, m_plus_1), (1, 0)), -L)
    lifted = expression_from_correlators(sc, terms, name=f"lift3[{expr.name}]")
    lifted.broadcast_local_bound = 2.0 * L
    return lifted


def lift_to_four_party(expr: BellExpression) -> BellExpression:
    """Promote a bipartite inequality to the symmetric four-party broadcast
    scenario: <I[A,C](B0+B1)D0> + L<(B1-B0)D1> with bound 2L.

    Party order is (A, B, C, D) with broadcast pairs (A,B) and (C,D).
    Valid only if the input has no 1-body terms for either party.
    """
    if expr.scenario.parties != 2 or not expr.scenario.is_binary():
        raise ValueError("lifting requires a binary-outcome bipartite expression")
    if expr.correlator_terms is None:
        raise ValueError("lifting requires correlator-form metadata")
    if _marginal_parties(expr):
        raise ValueError("expression has 1-body terms; four-party lifting invalid")
    if expr.local_bound is None:
        from .polytopes import local_bound

        expr.local_bound = local_bound(expr)
    L = expr.local_bound
    sc = binary_scenario(expr.scenario.inputs[0], 2, expr.scenario.inputs[1], 2)
    terms: dict[CorrelatorTerm, float] = {}

    def add(term: CorrelatorTerm, w: float):
        term = tuple(sorted(term))
        terms[term] = terms.get(term, 0.0) + w

    for term, w in expr.correlator_terms.items():
        d = dict(term)
        if len(d) != 2:
            raise ValueError("unexpected term arity after marginal check")
        for yb in (0, 1):
            add(((0, d[0]), (1, yb), (2, d[1]), (3, 0)), w)
    add(((1, 1), (3, 1)), L)
    add(((1, 0), (3, 1)), -L)
    lifted = expression_from_correlators(sc, terms, name=f"lift4[{expr.name}]")
    lifted.broadcast_local_bound = 2.0 * L
    return lifted


def detection_inefficiency_expression() -> BellExpression:
    """<CHSH[A0,A1,B0,B1] C1> - <CHSH[A0,A1,B0,B1]> + 2(<C1> - 1) <= 0."""
    sc = binary_scenario(2, 2, 2)
    chsh_terms = {
        ((0, 0), (1, 0)): 1.0,
        ((0, 1), (1, 0)): -1.0,
        ((0, 0), (1, 1)): 1.0,
        ((0, 1), (1, 1)): 1.0,
    }
    terms: dict[CorrelatorTerm, float] = {}
    for term, w in chsh_terms.items():
        terms[tuple(sorted(term + ((2, 1),)))] = w
        terms[term] = terms.get(term, 0.0) - w
    terms[((2, 1),)] = 2.0
    expr = expression_from_correlators(sc, terms, constant=-2.0, name="det-eff-ineq")
    expr.broadcast_local_bound = 0.0
    return expr


# ---------------------------------------------------------------------------
# Detector inefficiency


def apply_detector_inefficiency(
    b: Behaviour,
    eta: float,
    fail_strategies: Sequence[Sequence[int]],
    strict_paper: bool = False,
    validate: bool = True,
) -> Behaviour:
    """Mix in no-detection events at efficiency eta.

    ``fail_strategies[p][x]`` is the +-1 outcome party p reports when its
    detector fails on input x.  Detector failures are independent across
    parties.  With ``strict_paper=True`` the 3-party formula reproduces
    the displayed equations verbatim, including the unnormalized
    delta_fA * delta_fC * p(c|z) term; the default substitutes p(b|y)
    there, which is the normalized version.
    """
    if not b.scenario.is_binary():
        raise ValueError("detector model requires binary outcomes")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    n = b.scenario.parties
    fail_idx = [[0 if s == 1 else 1 for s in fs] for fs in fail_strategies]
    if len(fail_idx) != n or any(
        len(fail_idx[p]) != b.scenario.inputs[p] for p in range(n)
    ):
        raise ValueError("fail_strategies must give +-1 per party per input")

    out = np.zeros(b.scenario.shape)
    for fired in itertools.product((True, False), repeat=n):
        weight = float(np.prod([eta if f else 1 - eta for f in fired]))
        if weight == 0.0:
            continue
        alive = [p for p in range(n) if fired[p]]
        dead = [p for p in range(n) if not fired[p]]
        if strict_paper and n == 3 and dead == [0, 2]:
            # Verbatim displayed term: delta_fA delta_fC p(c|z).
            marg = b.marginal([2])
        else:
            marg = b.marginal(alive) if alive else None
        term = np.zeros(b.scenario.shape)
        for outs in itertools.product(*[range(2) for _ in range(n)]):
            for xs in itertools.product(*[range(k) for k in b.scenario.inputs]):
                if any(outs[p] != fail_idx[p][xs[p]] for p in dead):
                    continue
                if marg is None:
                    val = 1.0
                elif strict_paper and n == 3 and dead == [0, 2]:
                    val = marg.table[(outs[2], xs[2])]
                else:
                    val = marg.table[tuple(outs[p] for p in alive) + tuple(xs[p] for p in alive)]
                term[outs + xs] = val
        out += weight * term
    result = Behaviour(b.scenario, out)
    if validate and not strict_paper:
        result.validate()
    return result


def all_fail_strategies(scenario: Scenario) -> Iterable[list[list[int]]]:
    """All deterministic +-1 fail maps, one per party per input."""
    per_party = []
    for p in range(scenario.parties):
        per_party.append(list(itertools.product((1, -1), repeat=scenario.inputs[p])))
    for combo in itertools.product(*per_party):
        yield [list(c) for c in combo]
