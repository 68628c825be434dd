"""Dense complex-matrix kernel.

Everything downstream stores algebra elements as dense ``complex128`` arrays.
Vectorisation is row-major throughout, so that for square ``A, X, B``::

    vec(A @ X @ B) == np.kron(A, B.T) @ vec(X)

Residuals are measured as the largest entry modulus. That norm is invariant
under ``X -> X (x) 1``, which keeps tolerances independent of how many idle
tensor factors an element carries.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, reduce
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla

from .checks import max_abs
from .errors import (
    DependentBasisError,
    NonHermitianError,
    NotInSpanError,
    NotPSDError,
    NotSquareError,
)

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class ToleranceConfig:
    eig_tol: float = 1e-9
    eq_tol: float = 1e-10
    rank_tol: float = 1e-10

    def __post_init__(self):
        for name in ("eig_tol", "eq_tol", "rank_tol"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be strictly positive, got {value!r}")
        if self.eq_tol < _EPS:
            raise ValueError(f"eq_tol must be at least machine epsilon ({_EPS:.3g})")

    @classmethod
    def uniform(cls, tol: float) -> "ToleranceConfig":
        return cls(eig_tol=tol, eq_tol=max(tol, _EPS), rank_tol=tol)


DEFAULT_TOL = ToleranceConfig()


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite complex 2-d array."""
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2:
        raise NotSquareError(f"{name} must be 2-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def as_square(a, name: str = "matrix") -> np.ndarray:
    a = as_matrix(a, name)
    if a.shape[0] != a.shape[1]:
        raise NotSquareError(f"{name} must be square, got shape {a.shape}")
    return a


def vec(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x.reshape(x.shape[:-2] + (-1,))


def unvec(v: np.ndarray, dim: int | None = None) -> np.ndarray:
    v = np.asarray(v)
    if dim is None:
        dim = int(round(np.sqrt(v.shape[-1])))
    return v.reshape(v.shape[:-1] + (dim, dim))


def dagger(x: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(x, -1, -2))


def commutator(a, b):
    return a @ b - b @ a


def anticommutator(a, b):
    return a @ b + b @ a


def kron(a, b) -> np.ndarray:
    return np.kron(np.asarray(a, dtype=complex), np.asarray(b, dtype=complex))


def kron_all(factors: Iterable) -> np.ndarray:
    factors = list(factors)
    if not factors:
        return np.ones((1, 1), dtype=complex)
    return reduce(kron, factors)


def matrix_unit(d: int, k: int, l: int) -> np.ndarray:
    e = np.zeros((d, d), dtype=complex)
    e[k, l] = 1.0
    return e


def matrix_units(d: int) -> np.ndarray:
    """All ``d*d`` matrix units, stacked row-major over ``(k, l)``."""
    return np.eye(d * d, dtype=complex).reshape(d * d, d, d)


def hermitian_residual(a: np.ndarray) -> float:
    return max_abs(a - dagger(a))


def _check_hermitian(a: np.ndarray, tol: ToleranceConfig) -> np.ndarray:
    a = as_square(a)
    if hermitian_residual(a) > tol.eq_tol * max(1.0, max_abs(a)):
        raise NonHermitianError(
            f"matrix is not Hermitian (asymmetry {hermitian_residual(a):.3g})"
        )
    return (a + dagger(a)) / 2


def min_eigenvalue(a, tol: ToleranceConfig = DEFAULT_TOL) -> float:
    """Smallest eigenvalue of the symmetrised matrix."""
    h = _check_hermitian(a, tol)
    return float(sla.eigvalsh(h)[0])


def is_psd(a, tol: ToleranceConfig = DEFAULT_TOL) -> bool:
    return min_eigenvalue(a, tol) >= -tol.eig_tol


def psd_sqrt(a, tol: ToleranceConfig = DEFAULT_TOL) -> np.ndarray:
    h = _check_hermitian(a, tol)
    w, v = sla.eigh(h)
    if w[0] < -tol.eig_tol:
        raise NotPSDError(f"negative eigenvalue {w[0]:.3g}", min_eigenvalue=float(w[0]))
    w = np.sqrt(np.clip(w, 0.0, None))
    return (v * w) @ dagger(v)


def psd_inv_sqrt(a, tol: ToleranceConfig = DEFAULT_TOL) -> np.ndarray:
    h = _check_hermitian(a, tol)
    w, v = sla.eigh(h)
    if w[0] <= tol.eig_tol:
        raise NotPSDError("matrix is not positive definite", min_eigenvalue=float(w[0]))
    return (v / np.sqrt(w)) @ dagger(v)


def null_space(m: np.ndarray, rank_tol: float) -> np.ndarray:
    """Orthonormal basis (columns) of the numerical kernel of ``m``."""
    m = np.asarray(m)
    n = m.shape[1]
    if m.shape[0] == 0:
        return np.eye(n, dtype=m.dtype)
    _, s, vh = sla.svd(m, full_matrices=True, lapack_driver="gesvd")
    cutoff = rank_tol * max(1.0, s[0] if s.size else 0.0)
    rank = int(np.sum(s > cutoff))
    return np.conj(vh[rank:].T)


class SpanBasis:
    """An ordered, linearly independent family of ``D x D`` matrices.

    Coefficients are extracted with the Hilbert-Schmidt Gram system, since the
    bases used here (Fermi monomials in particular) are not orthogonal.
    """

    def __init__(
        self,
        elements,
        label: str = "",
        *,
        ambient_dim: int | None = None,
        labels: Sequence | None = None,
        parities: Sequence[int] | None = None,
        tol: ToleranceConfig = DEFAULT_TOL,
        check: bool = True,
    ):
        arr = np.asarray(elements, dtype=complex)
        if arr.size == 0:
            if ambient_dim is None:
                raise ValueError("ambient_dim is required for an empty basis")
            arr = np.zeros((0, ambient_dim, ambient_dim), dtype=complex)
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
            raise NotSquareError(f"basis elements must be square matrices, got {arr.shape}")
        if ambient_dim is not None and arr.shape[1] != ambient_dim:
            raise ValueError(f"elements have size {arr.shape[1]}, expected {ambient_dim}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("basis has non-finite entries")
        arr.setflags(write=False)
        self.elements = arr
        self.label = label
        self.labels = tuple(labels) if labels is not None else None
        self.parities = np.asarray(parities, dtype=int) if parities is not None else None
        self.tol = tol
        if check and len(self):
            self.check_independent()

    def __len__(self):
        return self.elements.shape[0]

    def __iter__(self):
        return iter(self.elements)

    def __getitem__(self, i):
        return self.elements[i]

    def __repr__(self):
        return f"SpanBasis({self.label!r}, n={len(self)}, ambient_dim={self.ambient_dim})"

    @property
    def ambient_dim(self) -> int:
        return self.elements.shape[1]

    @cached_property
    def vectors(self) -> np.ndarray:
        return self.elements.reshape(len(self), -1)

    @cached_property
    def gram(self) -> np.ndarray:
        b = self.vectors
        return np.conj(b) @ b.T

    def check_independent(self):
        w = sla.eigvalsh(self.gram)
        if w[0] <= self.tol.rank_tol * max(1.0, w[-1]):
            raise DependentBasisError(
                f"basis {self.label!r} is linearly dependent "
                f"(Gram eigenvalues {w[0]:.3g} .. {w[-1]:.3g})"
            )

    @cached_property
    def _gram_factor(self):
        try:
            return sla.cho_factor(self.gram)
        except sla.LinAlgError as exc:
            raise DependentBasisError(f"singular Gram matrix for {self.label!r}") from exc

    def coefficients(self, x) -> np.ndarray:
        """Least-squares coefficients of ``x`` (shape ``(..., D, D)``)."""
        x = np.asarray(x, dtype=complex)
        flat = x.reshape(-1, self.ambient_dim**2)
        if len(self) == 0:
            return np.zeros(x.shape[:-2] + (0,), dtype=complex)
        b = self.vectors
        rhs = np.conj(b) @ flat.T
        c = sla.cho_solve(self._gram_factor, rhs)
        # one refinement step; the Gram system squares the condition number
        r = flat.T - b.T @ c
        c = c + sla.cho_solve(self._gram_factor, np.conj(b) @ r)
        return c.T.reshape(x.shape[:-2] + (len(self),))

    def synthesize(self, coeffs) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=complex)
        return np.tensordot(coeffs, self.elements, axes=([-1], [0]))

    def residual(self, x) -> float:
        x = np.asarray(x, dtype=complex)
        return max_abs(x - self.synthesize(self.coefficients(x)))

    def contains(self, x, tol: ToleranceConfig | None = None) -> bool:
        tol = tol or self.tol
        return self.residual(x) <= tol.eq_tol * max(1.0, max_abs(x))

    def adjoint(self) -> "SpanBasis":
        return SpanBasis(dagger(self.elements), f"{self.label}*", tol=self.tol, check=False)

    def orthonormalized(self) -> "SpanBasis":
        return orthonormal_span(self.elements, self.ambient_dim, self.tol, label=self.label)

    def select(self, mask, label: str | None = None) -> "SpanBasis":
        idx = np.flatnonzero(mask)
        return SpanBasis(
            self.elements[idx],
            label if label is not None else self.label,
            ambient_dim=self.ambient_dim,
            labels=[self.labels[i] for i in idx] if self.labels is not None else None,
            parities=self.parities[idx] if self.parities is not None else None,
            tol=self.tol,
            check=False,
        )


def expand_in_basis(x, basis: SpanBasis, tol: ToleranceConfig = DEFAULT_TOL) -> np.ndarray:
    """Coefficients ``c`` with ``x = sum_i c_i basis[i]``; raises if ``x`` is outside the span."""
    x = as_square(x)
    if x.shape[0] != basis.ambient_dim:
        raise ValueError(f"element has size {x.shape[0]}, basis ambient is {basis.ambient_dim}")
    c = basis.coefficients(x)
    res = max_abs(x - basis.synthesize(c))
    if res > tol.eq_tol * max(1.0, max_abs(x)):
        raise NotInSpanError(
            f"element is not in span({basis.label}) (residual {res:.3g})", residual=res
        )
    return c


def orthonormal_span(mats, ambient_dim: int, tol: ToleranceConfig = DEFAULT_TOL, label="") -> SpanBasis:
    """Orthonormal (Hilbert-Schmidt) basis of the span of ``mats``."""
    mats = np.asarray(mats, dtype=complex).reshape(-1, ambient_dim * ambient_dim)
    if mats.shape[0] == 0:
        return SpanBasis([], label, ambient_dim=ambient_dim, tol=tol)
    _, s, vh = sla.svd(mats, full_matrices=False, lapack_driver="gesvd")
    rank = int(np.sum(s > tol.rank_tol * max(1.0, s[0])))
    return SpanBasis(vh[:rank].reshape(rank, ambient_dim, ambient_dim), label, ambient_dim=ambient_dim, tol=tol, check=False)


def commutant_of(generators, ambient_dim: int, tol: ToleranceConfig = DEFAULT_TOL) -> SpanBasis:
    """Orthonormal basis of ``{x : x g = g x for every generator g}``."""
    gens = [as_square(g, "generator") for g in generators]
    d = ambient_dim
    if not gens:
        return SpanBasis(matrix_units(d), "commutant", tol=tol, check=False)
    eye = np.eye(d)
    blocks = []
    for g in gens:
        if g.shape[0] != d:
            raise ValueError(f"generator has size {g.shape[0]}, expected {d}")
        blocks.append(np.kron(eye, g.T) - np.kron(g, eye))
    ns = null_space(np.vstack(blocks), tol.rank_tol)
    return SpanBasis(ns.T.reshape(-1, d, d), "commutant", ambient_dim=d, tol=tol, check=False)


def intersect_spans(a: SpanBasis, b: SpanBasis, tol: ToleranceConfig = DEFAULT_TOL, label="") -> SpanBasis:
    if a.ambient_dim != b.ambient_dim:
        raise ValueError("spans live in different ambient algebras")
    d = a.ambient_dim
    if len(a) == 0 or len(b) == 0:
        return SpanBasis([], label, ambient_dim=d, tol=tol)
    oa, ob = a.orthonormalized(), b.orthonormalized()
    m = np.hstack([oa.vectors.T, -ob.vectors.T])
    ns = null_space(m, tol.rank_tol)
    elems = ns[: len(oa)].T @ oa.vectors
    return orthonormal_span(elems, d, tol, label=label)


def span_residual(inner: SpanBasis, outer: SpanBasis) -> float:
    """Worst residual of expanding each element of ``inner`` in ``outer``."""
    if len(inner) == 0:
        return 0.0
    x = inner.elements
    if len(outer) == 0:
        return max_abs(x)
    return max_abs(x - outer.synthesize(outer.coefficients(x)))


def spans_equal(a: SpanBasis, b: SpanBasis, tol: ToleranceConfig = DEFAULT_TOL) -> tuple[bool, float]:
    """Same dimension and mutual containment; returns ``(verdict, worst residual)``."""
    ra = span_residual(a.orthonormalized(), b)
    rb = span_residual(b.orthonormalized(), a)
    res = max(ra, rb)
    same_dim = len(a.orthonormalized()) == len(b.orthonormalized())
    return same_dim and res <= tol.eq_tol * 10, res


def random_matrix(rng: np.random.Generator, rows: int, cols: int | None = None) -> np.ndarray:
    cols = rows if cols is None else cols
    return (rng.standard_normal((rows, cols)) + 1j * rng.standard_normal((rows, cols))) / np.sqrt(2)


def random_psd(rng: np.random.Generator, d: int, rank: int | None = None) -> np.ndarray:
    x = random_matrix(rng, rank or d, d)
    return dagger(x) @ x


def random_density(rng: np.random.Generator, d: int, rank: int | None = None) -> np.ndarray:
    rho = random_psd(rng, d, rank)
    return rho / np.trace(rho).real


def random_unitary(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(random_matrix(rng, d))
    return q * (np.diag(r) / np.abs(np.diag(r)))
