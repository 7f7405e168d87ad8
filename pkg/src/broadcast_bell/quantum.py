"""Quantum states, measurements, broadcast channels and named state families.

Subsystem ordering is fixed globally as (A, B, C, D) with row-major
Kronecker composition; channels are represented by their Choi states
with the input factor first:  Omega(sigma) = Tr_in(rho_Omega (sigma^T x 1)).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULT_TOL
from .behaviours import Behaviour, Scenario
from . import linalg as la


@dataclass
class DensityMatrix:
    matrix: np.ndarray

    def __post_init__(self):
        m = la.assert_hermitian(self.matrix, tol=1e-9)
        if abs(np.trace(m).real - 1.0) > 1e-9:
            raise ValueError(f"trace {np.trace(m).real} != 1")
        if float(np.linalg.eigvalsh(m)[0]) < -1e-9:
            raise ValueError("density matrix not PSD")
        self.matrix = m

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass
class Povm:
    """One measurement: a list of PSD effects summing to the identity."""

    effects: list[np.ndarray]

    def __post_init__(self):
        self.effects = [la.assert_hermitian(e, tol=1e-9) for e in self.effects]
        d = self.effects[0].shape[0]
        total = sum(self.effects)
        if np.max(np.abs(total - np.eye(d))) > 1e-8:
            raise ValueError("effects do not sum to identity")
        for e in self.effects:
            if float(np.linalg.eigvalsh(e)[0]) < -1e-9:
                raise ValueError("effect not PSD")

    @property
    def dim(self) -> int:
        return self.effects[0].shape[0]

    @property
    def outcomes(self) -> int:
        return len(self.effects)


@dataclass
class MeasurementAssembly:
    """All measurements of one party, one Povm per input."""

    povms: list[Povm]
    party: str = ""

    def __post_init__(self):
        dims = {p.dim for p in self.povms}
        outs = {p.outcomes for p in self.povms}
        if len(dims) != 1 or len(outs) != 1:
            raise ValueError("all POVMs must share dim and outcome count")

    @property
    def dim(self) -> int:
        return self.povms[0].dim

    @property
    def inputs(self) -> int:
        return len(self.povms)

    @property
    def outcomes(self) -> int:
        return self.povms[0].outcomes

    def effect(self, a: int, x: int) -> np.ndarray:
        return self.povms[x].effects[a]


def observable_povm(obs: np.ndarray) -> Povm:
    """Binary POVM from a +-1 observable: effects (1 +- O)/2."""
    obs = la.assert_hermitian(obs, tol=1e-9)
    d = obs.shape[0]
    return Povm([(np.eye(d) + obs) / 2, (np.eye(d) - obs) / 2])


@dataclass
class ChoiState:
    """Choi state of a channel d_in -> prod(d_out), normalized to Tr = d_in.

    Index order is (input, out_1, ..., out_k); the trace over all output
    factors equals the identity on the input space.
    """

    matrix: np.ndarray
    d_in: int
    d_out: tuple[int, ...]

    def __post_init__(self):
        self.d_out = tuple(int(d) for d in self.d_out)
        m = la.assert_hermitian(self.matrix, tol=1e-8)
        total = self.d_in * int(np.prod(self.d_out))
        if m.shape[0] != total:
            raise ValueError("Choi matrix dim mismatch")
        if float(np.linalg.eigvalsh(m)[0]) < -1e-8:
            raise ValueError("Choi state not PSD")
        red = la.partial_trace(m, [self.d_in, int(np.prod(self.d_out))], 0)
        if np.max(np.abs(red - np.eye(self.d_in))) > 1e-7:
            raise ValueError("channel is not trace preserving")
        self.matrix = m

    def apply(self, sigma: np.ndarray) -> np.ndarray:
        """Omega(sigma) = Tr_in(rho_Omega (sigma^T x 1))."""
        sigma = la.as_matrix(sigma)
        if sigma.shape[0] != self.d_in:
            raise la.DimensionMismatchError("input state dim != channel d_in")
        d_o = int(np.prod(self.d_out))
        op = self.matrix @ np.kron(sigma.T, np.eye(d_o))
        return la.partial_trace(op, [self.d_in, d_o], 1)

    def kraus_operators(self, tol: float = 1e-12) -> list[np.ndarray]:
        vals, vecs = la.eig_hermitian(self.matrix)
        d_o = int(np.prod(self.d_out))
        kraus = []
        for lam, v in zip(vals, vecs.T):
            if lam < tol:
                continue
            # Choi vector |in, out> -> K[out, in]
            k = np.sqrt(lam) * v.reshape(self.d_in, d_o).T
            kraus.append(k)
        return kraus


def identity_choi(d: int) -> ChoiState:
    return ChoiState(d * la.proj(la.max_entangled(d)), d, (d,))


def apply_choi(channel: ChoiState, state: DensityMatrix, subsystem_dims: list[int], acted: int) -> DensityMatrix:
    """Apply 1 x ... x Omega x ... x 1 to subsystem `acted` of `state`."""
    if subsystem_dims[acted] != channel.d_in:
        raise la.DimensionMismatchError("acted subsystem dim != channel input dim")
    rho = state.matrix
    n = len(subsystem_dims)
    d_o = int(np.prod(channel.d_out))
    # Move the acted subsystem to the last slot, apply, move back.
    t = rho.reshape(*subsystem_dims, *subsystem_dims)
    order = [i for i in range(n) if i != acted] + [acted]
    perm = order + [i + n for i in order]
    t = t.transpose(perm)
    d_rest = int(np.prod([subsystem_dims[i] for i in order[:-1]])) if n > 1 else 1
    d_a = subsystem_dims[acted]
    flat = t.reshape(d_rest * d_a, d_rest * d_a)
    big = np.kron(np.eye(d_rest, dtype=complex), channel.matrix)
    arg = np.kron(la.partial_transpose(flat, [d_rest, d_a], 1), np.eye(d_o))
    # reorder arg from (rest, in, out) already matches big's (rest, in, out)
    out = big @ arg
    out = la.partial_trace(out, [d_rest, d_a, d_o], [0, 2])
    # Undo the permutation on the (rest..., out) ordering.
    new_dims_perm = [subsystem_dims[i] for i in order[:-1]] + [d_o]
    t2 = out.reshape(*new_dims_perm, *new_dims_perm)
    inv = np.argsort(order)
    m = len(order)
    t2 = t2.transpose(list(inv) + [int(i) + m for i in inv])
    full = t2.reshape(out.shape)
    return DensityMatrix(full)


# ---------------------------------------------------------------------------
# Named state families


def isotropic_state(alpha: float) -> DensityMatrix:
    """alpha |Phi+><Phi+| + (1 - alpha) 1/4."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return DensityMatrix(alpha * la.proj(la.max_entangled(2)) + (1 - alpha) * np.eye(4) / 4)


def rho_povm_family(alpha: float, chi: float) -> DensityMatrix:
    """Two-qubit family 1/2 rho(alpha,chi) + 1/2 rho_A x |0><0|."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if not 0.0 <= chi <= np.pi / 4 + 1e-12:
        raise ValueError("chi must lie in [0, pi/4]")
    psi = np.cos(chi) * np.kron(la.ket(0, 2), la.ket(0, 2)) + np.sin(chi) * np.kron(
        la.ket(1, 2), la.ket(1, 2)
    )
    psi_proj = la.proj(psi)
    rho_chi_b = la.partial_trace(psi_proj, [2, 2], 1)
    rho_ac = alpha * psi_proj + (1 - alpha) * np.kron(np.eye(2) / 2, rho_chi_b)
    rho_a = la.partial_trace(rho_ac, [2, 2], 0)
    return DensityMatrix(0.5 * rho_ac + 0.5 * np.kron(rho_a, la.proj(la.ket(0, 2))))


def povm_lhv_condition(alpha: float, chi: float) -> bool:
    """True iff cos^2(2 chi) >= (2 alpha - 1) / ((2 - alpha) alpha^3),
    i.e. the family member has an LHV model for all local POVMs."""
    if not 0.0 < alpha <= 1.0:
        if alpha == 0.0:
            return True  # numerator negative, condition vacuous
        raise ValueError("alpha must lie in (0, 1]")
    rhs = (2 * alpha - 1) / ((2 - alpha) * alpha**3)
    return bool(np.cos(2 * chi) ** 2 >= rhs)


# ---------------------------------------------------------------------------
# Behaviour construction


def behaviour_from_quantum(
    state: DensityMatrix, assemblies: list[MeasurementAssembly]
) -> Behaviour:
    """p(ab...|xy...) = Tr(rho A_{a|x} x B_{b|y} x ...)."""
    dims = [m.dim for m in assemblies]
    if int(np.prod(dims)) != state.dim:
        raise la.DimensionMismatchError("measurement dims do not factor the state")
    sc = Scenario(
        tuple(m.inputs for m in assemblies), tuple(m.outcomes for m in assemblies)
    )
    table = np.zeros(sc.shape)
    rho = state.matrix
    for xs in itertools.product(*[range(m.inputs) for m in assemblies]):
        for outs in itertools.product(*[range(m.outcomes) for m in assemblies]):
            op = la.kron_all([assemblies[p].effect(outs[p], xs[p]) for p in range(len(assemblies))])
            table[outs + xs] = float(np.real(np.trace(rho @ op)))
    return Behaviour(sc, table).validate()


# ---------------------------------------------------------------------------
# Random objects for see-saw initialization


def haar_unitary(d: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def random_projective_assembly(
    dim: int, n_inputs: int, rng: np.random.Generator, party: str = ""
) -> MeasurementAssembly:
    """Binary projective measurements from Haar-random unitaries.

    The +1 effect is a rank-(dim/2) projector (rank 1 for qubits).
    """
    povms = []
    half = max(1, dim // 2)
    for _ in range(n_inputs):
        u = haar_unitary(dim, rng)
        p_plus = sum(la.proj(u[:, k : k + 1]) for k in range(half))
        povms.append(Povm([p_plus, np.eye(dim) - p_plus]))
    return MeasurementAssembly(povms, party=party)


def random_isometry_choi(
    d_in: int, d_out: tuple[int, ...], rng: np.random.Generator
) -> ChoiState:
    """Choi state of a Haar-random isometry channel rho -> V rho V^dag.

    Rank-one Choi; such channels preserve entanglement with a reference
    system, which makes them good starting points for see-saw searches.
    """
    d_o = int(np.prod(d_out))
    if d_o < d_in:
        raise la.DimensionMismatchError("isometry needs d_out >= d_in")
    v = haar_unitary(d_o, rng)[:, :d_in]
    m = np.zeros((d_in * d_o, d_in * d_o), dtype=complex)
    for i in range(d_in):
        for j in range(d_in):
            block = np.outer(v[:, i], v[:, j].conj())
            m[i * d_o : (i + 1) * d_o, j * d_o : (j + 1) * d_o] = block
    return ChoiState(m, d_in, tuple(d_out))


def random_choi(d_in: int, d_out: tuple[int, ...], rng: np.random.Generator) -> ChoiState:
    """Full-support random channel: Wishart Choi projected onto trace preservation."""
    d_o = int(np.prod(d_out))
    n = d_in * d_o
    g = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    w = g @ g.conj().T
    red = la.partial_trace(w, [d_in, d_o], 0)
    # Symmetric normalization red^{-1/2} (x) 1, which enforces Tr_out = 1_in.
    vals, vecs = np.linalg.eigh(red)
    inv_sqrt = vecs @ np.diag(1.0 / np.sqrt(np.maximum(vals, 1e-12))) @ vecs.conj().T
    s = np.kron(inv_sqrt, np.eye(d_o))
    return ChoiState(s @ w @ s.conj().T, d_in, tuple(d_out))


# ---------------------------------------------------------------------------
# Serialization


def _mat_to_json(m: np.ndarray) -> list:
    return [[[float(x.real), float(x.imag)] for x in row] for row in np.asarray(m, dtype=complex)]


def _mat_from_json(rows: list) -> np.ndarray:
    return np.array([[complex(re, im) for re, im in row] for row in rows])


def assembly_to_json(assembly: MeasurementAssembly) -> str:
    return json.dumps(
        {
            "party": assembly.party,
            "dim": assembly.dim,
            "povms": [[_mat_to_json(e) for e in p.effects] for p in assembly.povms],
        }
    )


def assembly_from_json(text: str) -> MeasurementAssembly:
    d = json.loads(text)
    return MeasurementAssembly(
        [Povm([_mat_from_json(e) for e in p]) for p in d["povms"]], party=d.get("party", "")
    )


def choi_to_json(choi: ChoiState) -> str:
    return json.dumps(
        {"d_in": choi.d_in, "d_out": list(choi.d_out), "matrix": _mat_to_json(choi.matrix)}
    )


def choi_from_json(text: str) -> ChoiState:
    d = json.loads(text)
    return ChoiState(_mat_from_json(d["matrix"]), d["d_in"], tuple(d["d_out"]))


def state_to_json(state: DensityMatrix) -> str:
    return json.dumps({"dim": state.dim, "matrix": _mat_to_json(state.matrix)})


def state_from_json(text: str) -> DensityMatrix:
    return DensityMatrix(_mat_from_json(json.loads(text)["matrix"]))
