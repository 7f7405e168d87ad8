"""Dense complex linear algebra primitives.

Everything operates on plain ``numpy`` arrays of ``complex128``.  The
subsystem ordering convention is fixed globally: subsystem 0 is the
leftmost tensor factor and composite indices are row-major, i.e.
``kron(A, B)`` places ``A`` on subsystem 0.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .config import DEFAULT_TOL, Tolerances


class DimensionMismatchError(ValueError):
    """Subsystem dimensions inconsistent with the matrix shape."""


class NotHermitianError(ValueError):
    """Input matrix is not Hermitian within tolerance."""


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=complex)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def is_hermitian(m, tol: float = DEFAULT_TOL.hermiticity) -> bool:
    a = as_matrix(m)
    return a.shape[0] == a.shape[1] and np.max(np.abs(a - a.conj().T)) <= tol


def assert_hermitian(m, tol: float = DEFAULT_TOL.hermiticity) -> np.ndarray:
    a = as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise NotHermitianError(f"matrix is {a.shape}, not square")
    dev = np.max(np.abs(a - a.conj().T))
    if dev > tol:
        raise NotHermitianError(f"Hermiticity deviation {dev:.3e} > {tol:.1e}")
    return 0.5 * (a + a.conj().T)


def kron(a, b) -> np.ndarray:
    """Kronecker product, subsystem `a` on the left."""
    return np.kron(as_matrix(a), as_matrix(b))


def kron_all(mats: Sequence[np.ndarray]) -> np.ndarray:
    out = as_matrix(mats[0])
    for m in mats[1:]:
        out = np.kron(out, as_matrix(m))
    return out


def _check_dims(m: np.ndarray, dims: Sequence[int]) -> None:
    if int(np.prod(dims)) != m.shape[0] or m.shape[0] != m.shape[1]:
        raise DimensionMismatchError(
            f"dims {list(dims)} do not factor a {m.shape} matrix"
        )


def partial_trace(m, dims: Sequence[int], keep: Sequence[int] | int) -> np.ndarray:
    """Trace out all subsystems not listed in `keep`.

    `dims` are the subsystem dimensions in tensor order; `keep` is an
    index or ordered collection of indices of subsystems to retain.
    """
    a = as_matrix(m)
    _check_dims(a, dims)
    if isinstance(keep, (int, np.integer)):
        keep = [int(keep)]
    keep = sorted(int(k) for k in keep)
    n = len(dims)
    if any(k < 0 or k >= n for k in keep):
        raise DimensionMismatchError(f"keep={keep} out of range for {n} subsystems")
    t = a.reshape(*dims, *dims)
    # Trace pairs (i, i+n) for dropped subsystems, highest index first so
    # earlier axis positions stay valid.
    for i in sorted(set(range(n)) - set(keep), reverse=True):
        t = np.trace(t, axis1=i, axis2=i + t.ndim // 2)
    d_keep = int(np.prod([dims[k] for k in keep])) if keep else 1
    return t.reshape(d_keep, d_keep)


def partial_transpose(m, dims: Sequence[int], subsystems: Sequence[int] | int) -> np.ndarray:
    """Transpose the listed subsystems in place."""
    a = as_matrix(m)
    _check_dims(a, dims)
    if isinstance(subsystems, (int, np.integer)):
        subsystems = [int(subsystems)]
    n = len(dims)
    subsystems = set(int(s) for s in subsystems)
    if any(s < 0 or s >= n for s in subsystems):
        raise DimensionMismatchError(f"subsystems {subsystems} out of range")
    t = a.reshape(*dims, *dims)
    perm = list(range(2 * n))
    for s in subsystems:
        perm[s], perm[s + n] = perm[s + n], perm[s]
    return t.transpose(perm).reshape(a.shape)


def eig_hermitian(m, tol: Tolerances = DEFAULT_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (real, descending) and matching orthonormal eigenvector columns."""
    a = assert_hermitian(m, tol.hermiticity)
    vals, vecs = np.linalg.eigh(a)
    order = np.argsort(vals)[::-1]
    return vals[order].real, vecs[:, order]


def min_eigenvalue(m) -> float:
    return float(np.linalg.eigvalsh(assert_hermitian(m, tol=1e-8))[0])


def is_psd(m, tol: float = DEFAULT_TOL.psd) -> bool:
    a = as_matrix(m)
    if not is_hermitian(a, max(tol, 1e-8)):
        return False
    return float(np.linalg.eigvalsh(0.5 * (a + a.conj().T))[0]) >= -tol


def dag(m) -> np.ndarray:
    return as_matrix(m).conj().T


def ket(index: int, dim: int) -> np.ndarray:
    v = np.zeros((dim, 1), dtype=complex)
    v[index, 0] = 1.0
    return v


def proj(vec) -> np.ndarray:
    v = np.asarray(vec, dtype=complex).reshape(-1, 1)
    return v @ v.conj().T


# Pauli matrices and common constants.
I2 = np.eye(2, dtype=complex)
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)


def max_entangled(d: int = 2) -> np.ndarray:
    """|Phi+> on C^d x C^d as a column vector."""
    v = np.zeros((d * d, 1), dtype=complex)
    for i in range(d):
        v[i * d + i, 0] = 1.0
    return v / np.sqrt(d)
