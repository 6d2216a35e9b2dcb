"""Dense symmetric linear algebra and Hermite-tensor kernels.

Everything here is pure and value-semantic: the wrapped arrays are frozen
at construction and operations never mutate their inputs.  Third- and
fourth-order objects are only ever materialized in low-dimensional
(projected) coordinates; full-dimensional tensors stay matrix-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolationError, DegenerateInputError, NumericalError


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SymMatrix:
    """A real symmetric matrix, symmetrized and frozen at construction."""

    entries: np.ndarray

    def __init__(self, entries):
        a = np.asarray(entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ContractViolationError(f"expected a square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ContractViolationError("matrix entries must be finite")
        object.__setattr__(self, "entries", _frozen(0.5 * (a + a.T)))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class SymTensor3:
    """A third-order tensor symmetric under all six index permutations."""

    entries: np.ndarray

    def __init__(self, entries, symmetrize: bool = True):
        a = np.asarray(entries, dtype=np.float64)
        if a.ndim != 3 or len(set(a.shape)) != 1:
            raise ContractViolationError(f"expected a cubic 3-way array, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ContractViolationError("tensor entries must be finite")
        if symmetrize:
            a = symmetrize3(a)
        object.__setattr__(self, "entries", _frozen(a))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def slice_along(self, direction: np.ndarray) -> SymMatrix:
        """Contraction T(., ., direction) as a symmetric matrix."""
        direction = np.asarray(direction, dtype=np.float64)
        if direction.shape != (self.dim,):
            raise ContractViolationError("slice direction has wrong dimension")
        return SymMatrix(np.tensordot(self.entries, direction, axes=([2], [0])))


def symmetrize3(a: np.ndarray) -> np.ndarray:
    """Average of a 3-way array over all six axis permutations."""
    return (
        a
        + a.transpose(0, 2, 1)
        + a.transpose(1, 0, 2)
        + a.transpose(1, 2, 0)
        + a.transpose(2, 0, 1)
        + a.transpose(2, 1, 0)
    ) / 6.0


@dataclass(frozen=True)
class LinearOperator:
    """Matrix-free linear map on R^dim.

    ``apply`` maps a vector to a vector; ``apply_block``, when given,
    maps a (dim, k) column block in one pass and must agree with
    column-wise ``apply``.
    """

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    symmetric: bool = True
    apply_block: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ContractViolationError(f"operator expects dim {self.dim}, got {v.shape}")
        return self.apply(v)

    def matmat(self, block: np.ndarray) -> np.ndarray:
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2 or block.shape[0] != self.dim:
            raise ContractViolationError("block shape does not match operator dim")
        if self.apply_block is not None:
            return self.apply_block(block)
        return np.column_stack([self.apply(block[:, j]) for j in range(block.shape[1])])


@dataclass(frozen=True)
class EigenDecomposition:
    """Spectral factorization: values sorted by decreasing magnitude."""

    values: np.ndarray
    vectors: np.ndarray  # orthonormal columns, aligned with values

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def hermite2_apply(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply (w w^T - I) to v without forming the matrix: (w.v) w - v."""
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if w.shape != v.shape or w.ndim != 1:
        raise ContractViolationError("hermite2_apply needs two equal-length vectors")
    return np.dot(w, v) * w - v


def hermite3(u: np.ndarray) -> SymTensor3:
    """Third probabilists' Hermite tensor of u.

    entries(i,j,k) = u_i u_j u_k - (u_i d_jk + u_j d_ki + u_k d_ij),
    which has zero mean under u ~ N(0, I).
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1:
        raise ContractViolationError("hermite3 expects a vector")
    if not np.all(np.isfinite(u)):
        raise ContractViolationError("hermite3 input must be finite")
    n = u.shape[0]
    eye = np.eye(n)
    cube = np.einsum("i,j,k->ijk", u, u, u)
    lower = (
        np.einsum("i,jk->ijk", u, eye)
        + np.einsum("j,ik->ijk", u, eye)
        + np.einsum("k,ij->ijk", u, eye)
    )
    return SymTensor3(cube - lower, symmetrize=False)


def hermite4_contract(u: np.ndarray, a: np.ndarray) -> SymTensor3:
    """Fourth Hermite tensor of u contracted with unit vector a on one slot.

    H4(u) = u^(x4) - sym6(u (x) u (x) I) + sym3(I (x) I); contracting the
    last slot with a gives, entrywise,

        (u.a) u_i u_j u_k
        - (u_i u_j a_k + u_i a_j u_k + a_i u_j u_k)
        - (u.a) (u_i d_jk + u_j d_ik + u_k d_ij)
        + (a_i d_jk + a_j d_ik + a_k d_ij).
    """
    u = np.asarray(u, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if u.shape != a.shape or u.ndim != 1:
        raise ContractViolationError("hermite4_contract needs two equal-length vectors")
    if abs(np.linalg.norm(a) - 1.0) > 1e-12:
        raise ContractViolationError("contraction probe must be a unit vector")
    n = u.shape[0]
    eye = np.eye(n)
    ua = float(np.dot(u, a))
    cube = ua * np.einsum("i,j,k->ijk", u, u, u)
    uua = (
        np.einsum("i,j,k->ijk", u, u, a)
        + np.einsum("i,j,k->ijk", u, a, u)
        + np.einsum("i,j,k->ijk", a, u, u)
    )
    u_tilde = (
        np.einsum("i,jk->ijk", u, eye)
        + np.einsum("j,ik->ijk", u, eye)
        + np.einsum("k,ij->ijk", u, eye)
    )
    a_tilde = (
        np.einsum("i,jk->ijk", a, eye)
        + np.einsum("j,ik->ijk", a, eye)
        + np.einsum("k,ij->ijk", a, eye)
    )
    return SymTensor3(cube - uua - ua * u_tilde + a_tilde, symmetrize=False)


def _off_diagonal_mass(mats: np.ndarray) -> float:
    """Sum of squared off-diagonal entries over a (k, n, n) stack."""
    k, n, _ = mats.shape
    diag_sq = np.einsum("kii->k", mats**2).sum()
    return float((mats**2).sum() - diag_sq)


def sym_eig(m: SymMatrix | np.ndarray, max_sweeps: int = 100) -> EigenDecomposition:
    """Full spectral decomposition of a symmetric matrix by cyclic Jacobi.

    Converges when the off-diagonal Frobenius mass drops below
    1e-12 * ||M||_F; raises NumericalError (with the residual) if it does
    not within ``max_sweeps`` sweeps.
    """
    a = m.entries.copy() if isinstance(m, SymMatrix) else SymMatrix(m).entries.copy()
    n = a.shape[0]
    v = np.eye(n)
    norm = float(np.linalg.norm(a))
    if n == 1 or norm == 0.0:
        return _sorted_eig(np.diag(a).copy(), v)
    target = 1e-12 * norm
    for _ in range(max_sweeps):
        off = math.sqrt(max(_off_diagonal_mass(a[None, :, :]), 0.0))
        if off <= target:
            return _sorted_eig(np.diag(a).copy(), v)
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                _rotate_inplace(a[None, :, :], v, p, q, c, s)
                a[p, q] = a[q, p] = 0.0
    off = math.sqrt(max(_off_diagonal_mass(a[None, :, :]), 0.0))
    if off <= target:
        return _sorted_eig(np.diag(a).copy(), v)
    raise NumericalError(
        f"Jacobi eigensolver did not converge in {max_sweeps} sweeps", residual=off
    )


def _sorted_eig(values: np.ndarray, vectors: np.ndarray) -> EigenDecomposition:
    order = np.argsort(-np.abs(values), kind="stable")
    return EigenDecomposition(values=_frozen(values[order]), vectors=_frozen(vectors[:, order]))


def _rotate_inplace(mats: np.ndarray, basis: np.ndarray, p: int, q: int, c: float, s: float):
    """Two-sided Givens rotation on a (k,n,n) symmetric stack plus basis update.

    Columns/rows transform as new_p = c*p + s*q, new_q = -s*p + c*q.
    """
    col_p = mats[:, :, p].copy()
    col_q = mats[:, :, q].copy()
    mats[:, :, p] = c * col_p + s * col_q
    mats[:, :, q] = -s * col_p + c * col_q
    row_p = mats[:, p, :].copy()
    row_q = mats[:, q, :].copy()
    mats[:, p, :] = c * row_p + s * row_q
    mats[:, q, :] = -s * row_p + c * row_q
    bp = basis[:, p].copy()
    basis[:, p] = c * bp + s * basis[:, q]
    basis[:, q] = -s * bp + c * basis[:, q]


def orthonormalize(m: np.ndarray) -> np.ndarray:
    """Orthonormal basis with the same column span as the input.

    Rank deficiency (smallest singular value <= 1e-12) raises
    DegenerateInputError.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.shape[1] > m.shape[0]:
        raise DegenerateInputError("more columns than rows cannot be orthonormalized")
    sv = np.linalg.svd(m, compute_uv=False)
    if sv.size == 0 or sv[-1] <= 1e-12:
        raise DegenerateInputError(
            f"column set is rank deficient (smallest singular value {sv[-1] if sv.size else 0.0:.3e})"
        )
    q, r = np.linalg.qr(m)
    # Fix the sign convention so the result is a deterministic function of m.
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    return q * signs


@dataclass(frozen=True)
class JointDiagResult:
    """Rotation and per-matrix diagonals from joint diagonalization."""

    rotation: np.ndarray              # orthonormal (n, n)
    diagonals: np.ndarray             # (k, n): diag of Q^T M_l Q
    off_diagonal_mass: float          # remaining summed squared off-diag mass
    sweeps: int
    converged: bool


def joint_diagonalize(
    mats: Sequence[SymMatrix | np.ndarray],
    tol: float = 1e-12,
    max_sweeps: int = 100,
) -> JointDiagResult:
    """Approximate simultaneous diagonalization of symmetric matrices.

    Cyclic Jacobi sweeps where each (p, q) rotation angle minimizes the
    summed squared off-diagonal mass across all matrices (the closed-form
    angle of the classical joint-rotation scheme).  Stops when the
    relative decrease of that mass per sweep falls below ``tol``.  On
    non-convergence the best iterate is returned with ``converged=False``
    and the caller decides.
    """
    if len(mats) == 0:
        raise ContractViolationError("need at least one matrix")
    stack = np.stack(
        [m.entries if isinstance(m, SymMatrix) else SymMatrix(m).entries for m in mats]
    ).copy()
    k, n, _ = stack.shape
    if any(m.shape != (n, n) for m in stack):
        raise ContractViolationError("all matrices must share one dimension")
    q = np.eye(n)
    total = float((stack**2).sum())
    if n == 1 or total == 0.0:
        return JointDiagResult(_frozen(q), _frozen(np.einsum("kii->ki", stack)), 0.0, 0, True)
    floor = 1e-26 * total
    off = _off_diagonal_mass(stack)
    sweeps = 0
    converged = off <= floor
    while not converged and sweeps < max_sweeps:
        for p in range(n - 1):
            for pq in range(p + 1, n):
                h1 = stack[:, p, p] - stack[:, pq, pq]
                h2 = stack[:, p, pq] + stack[:, pq, p]
                ton = float(h1 @ h1 - h2 @ h2)
                toff = float(2.0 * (h1 @ h2))
                theta = 0.5 * math.atan2(toff, ton + math.hypot(ton, toff))
                s = math.sin(theta)
                if abs(s) > 1e-16:
                    _rotate_inplace(stack, q, p, pq, math.cos(theta), s)
        sweeps += 1
        new_off = _off_diagonal_mass(stack)
        if new_off <= floor or (off - new_off) <= tol * max(off, floor):
            converged = True
        off = new_off
    return JointDiagResult(
        rotation=_frozen(q),
        diagonals=_frozen(np.einsum("kii->ki", stack)),
        off_diagonal_mass=float(off),
        sweeps=sweeps,
        converged=bool(converged),
    )
