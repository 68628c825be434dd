"""Transition expectations on a bond ``[n, n+1]`` and their extension to the past.

Kernels are stored in local coordinates: ``E`` maps ``M_R`` (local
coordinates of ``[n, n+1]``, ``R = r_n r_{n+1}``) into ``M_{r_n}`` (local
coordinates of site ``n``). The extension to the prefix algebra works in
prefix coordinates, where the algebra of ``[0, m]`` is ``M_{r_0 ... r_m}``
for both lattice kinds.
"""
from __future__ import annotations

from functools import cached_property
from typing import Callable

import numpy as np

from .checks import Check, CheckSuite, max_abs
from .errors import (
    MarkovPropertyError,
    NotCompletelyPositiveError,
    PreconditionError,
)
from .lattice import LocalStructure, parity_split
from .linalg import (
    DEFAULT_TOL,
    SpanBasis,
    ToleranceConfig,
    dagger,
    matrix_units,
    orthonormal_span,
    psd_inv_sqrt,
    random_matrix,
)
from .maps import ChoiMatrix, CpMap, choi_from_unit_images


def _scale(x) -> float:
    return max(1.0, max_abs(x))


def _apply_matrix(mat: np.ndarray, x: np.ndarray, out_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=complex)
    lead = x.shape[:-2]
    y = x.reshape(lead + (-1,)) @ mat.T
    return y.reshape(lead + (out_dim, out_dim))


def _transpose_matrix(mat: np.ndarray, din: int, dout: int) -> np.ndarray:
    """Matrix of the trace-pairing dual ``F^T`` with ``tr(a F(x)) = tr(F^T(a) x)``."""
    # vec(F^T(a)^T) = M^T vec(a^T); conjugate the transposes into the matrix
    perm_in = np.arange(din * din).reshape(din, din).T.reshape(-1)
    perm_out = np.arange(dout * dout).reshape(dout, dout).T.reshape(-1)
    return mat.T[perm_in][:, perm_out]


class TransitionExpectation:
    """A linear map ``E: A_[n,n+1] -> A_n`` in local coordinates.

    The Markov property (range inside the commutant of the past intersected
    with site ``n``) is checked at construction unless ``check_markov`` is
    false; complete positivity and unitality are measured, not required.
    """

    def __init__(
        self,
        structure: LocalStructure,
        site: int,
        local: CpMap,
        *,
        label: str = "",
        check_markov: bool = True,
    ):
        if not 0 <= site < structure.horizon - 1:
            raise ValueError(f"bond [{site}, {site + 1}] outside horizon {structure.horizon}")
        self.structure = structure
        self.site = site
        self.tol = structure.tol
        self.r = structure.block_dims[site]
        self.r_next = structure.block_dims[site + 1]
        self.dim = self.r * self.r_next
        if local.domain.ambient_dim != self.dim or local.codomain.ambient_dim != self.r:
            raise ValueError(
                f"kernel at site {site} must map M_{self.dim} to M_{self.r}, "
                f"got M_{local.domain.ambient_dim} to M_{local.codomain.ambient_dim}"
            )
        self.local = local
        self.label = label or local.label
        self.matrix = local.local_matrix
        if check_markov:
            chk = verify_markov_property(self)
            if not chk:
                raise MarkovPropertyError(
                    f"kernel {self.label!r} at site {site} violates the Markov property "
                    f"(residual {chk.residual:.3g} on basis element {chk.witness})"
                )

    def __repr__(self):
        return f"TransitionExpectation({self.label!r}, site={self.site})"

    # ---- constructors ---------------------------------------------------------------

    @classmethod
    def _bases(cls, structure: LocalStructure, site: int, variant: str = "standard"):
        return (
            structure.local_product_basis(site, site + 1, variant),
            structure.local_site_basis(site),
        )

    @classmethod
    def from_function(cls, structure, site, fn: Callable, *, variant="standard", label="", check_markov=True):
        dom, cod = cls._bases(structure, site, variant)
        local = CpMap.from_function(fn, dom, cod, label=label, tol=structure.tol)
        return cls(structure, site, local, label=label, check_markov=check_markov)

    @classmethod
    def from_kraus(cls, structure, site, kraus, *, scale: float = 1.0, label="kraus", check_markov=True):
        """``X -> scale * sum_i K_i^* X K_i`` with ``K_i`` of shape ``(r_n r_{n+1}, r_n)``."""
        dom, cod = cls._bases(structure, site)
        local = CpMap.from_kraus(kraus, dom, cod, label=label, tol=structure.tol)
        if scale != 1.0:
            local = local.scaled(scale)
        return cls(structure, site, local, label=label, check_markov=check_markov)

    @classmethod
    def from_images(cls, structure, site, images, *, variant="standard", label="images", check_markov=True):
        """Images of the ordered-product basis of ``[site, site+1]`` (in its basis order)."""
        dom, cod = cls._bases(structure, site, variant)
        local = CpMap(dom, cod, images, label=label, tol=structure.tol)
        return cls(structure, site, local, label=label, check_markov=check_markov)

    @classmethod
    def from_matrix(cls, structure, site, matrix, *, label="matrix", check_markov=True):
        r = structure.block_dims[site]
        return cls.from_function(
            structure, site, lambda x: _apply_matrix(np.asarray(matrix), x, r), label=label, check_markov=check_markov
        )

    def at_site(self, site: int, structure: LocalStructure | None = None, check_markov: bool = True):
        """The same local map placed on another bond (site dimensions must agree)."""
        structure = structure or self.structure
        return TransitionExpectation.from_matrix(
            structure, site, self.matrix, label=self.label, check_markov=check_markov
        )

    def scaled(self, factor: float) -> "TransitionExpectation":
        return TransitionExpectation(
            self.structure, self.site, self.local.scaled(factor), label=f"{factor}*{self.label}", check_markov=False
        )

    def plus(self, other_fn: Callable, check_markov: bool = True, label: str = "") -> "TransitionExpectation":
        return TransitionExpectation.from_function(
            self.structure,
            self.site,
            lambda x: self.apply(x) + other_fn(x),
            label=label or f"{self.label}+",
            check_markov=check_markov,
        )

    # ---- action ---------------------------------------------------------------------

    def apply(self, x) -> np.ndarray:
        return _apply_matrix(self.matrix, x, self.r)

    __call__ = apply

    def dual(self, rho) -> np.ndarray:
        """``sigma`` with ``tr(rho E(x)) = tr(sigma x)``."""
        return _apply_matrix(_transpose_matrix(self.matrix, self.dim, self.r), rho, self.dim)

    @property
    def images(self) -> np.ndarray:
        return self.local.images

    @property
    def domain(self) -> SpanBasis:
        return self.local.domain

    def identity_residual(self) -> float:
        return max_abs(self.apply(np.eye(self.dim)) - np.eye(self.r))

    @property
    def identity_preserving(self) -> bool:
        return self.identity_residual() <= self.tol.eq_tol

    @property
    def even(self) -> bool:
        return bool(is_even(self))

    def choi(self) -> ChoiMatrix:
        units = matrix_units(self.dim)
        return choi_from_unit_images(self.apply(units), f"bond[{self.site},{self.site + 1}]")

    @cached_property
    def map(self) -> CpMap:
        """The kernel as a map between ambient subalgebras of ``structure``."""
        s = self.structure
        units = s.range_units(self.site, self.site + 1)
        site_units = s.range_units(self.site, self.site)
        dom = s.product_basis(self.site, self.site + 1)
        cod = s.site_basis(self.site)
        images = site_units.embed(self.images)
        return CpMap(dom, cod, images, domain_units=units.units, label=self.label, tol=self.tol, check=False)


# ---- properties of a single kernel -----------------------------------------------------


def verify_markov_property(
    e: TransitionExpectation, structure: LocalStructure | None = None, tol: ToleranceConfig | None = None, ambient: bool = False
) -> Check:
    """Every basis image must lie in the commutant of the past intersected with site ``n``."""
    structure = structure or e.structure
    tol = tol or e.tol
    if ambient:
        target = structure.commutant_intersection(e.site)
        images = e.map.images
    else:
        target = structure.admissible_local_basis(e.site)
        images = e.images
    per = np.max(np.abs(images - target.synthesize(target.coefficients(images))), axis=(-2, -1))
    i = int(np.argmax(per)) if per.size else 0
    res = float(per[i]) if per.size else 0.0
    ok = res <= tol.eq_tol * _scale(images)
    label = e.domain.labels[i] if e.domain.labels is not None and per.size else i
    return Check("markov_property", ok, res, None if ok else label)


def umegaki_local(structure: LocalStructure, n: int) -> CpMap:
    """The local conditional expectation on ``[n, n+1]``: identity (tensor) or even projection (Fermi)."""
    dom = structure.local_product_basis(n, n + 1)
    if not structure.is_fermi:
        return CpMap.identity(dom, label="E0", even=True)
    z = structure.range_parity(n, n + 1)
    cod = structure.local_product_basis(n, n + 1, parity=1)
    images = parity_split(dom.elements, z)[0]
    return CpMap(dom, cod, images, label="E0", even=True, tol=structure.tol)


def _bond_parity(e: TransitionExpectation) -> np.ndarray:
    return e.structure.range_parity(e.site, e.site + 1)


def is_even(e: TransitionExpectation) -> Check:
    """``E o Theta = E`` on the domain basis."""
    z = _bond_parity(e)
    b = e.domain.elements
    res = max_abs(e.apply(z[:, None] * b * z[None, :]) - e.images)
    return Check("even", res <= e.tol.eq_tol * _scale(e.images), res)


def verify_compat_E_E0(e: TransitionExpectation, structure: LocalStructure | None = None, tol: ToleranceConfig | None = None) -> Check:
    """``E o E0 = E`` on the domain basis; the evenness residual is reported alongside."""
    structure = structure or e.structure
    tol = tol or e.tol
    e0 = umegaki_local(structure, e.site)
    res = max_abs(e.apply(e0.images) - e.images)
    ok = res <= tol.eq_tol * _scale(e.images)
    ev = is_even(e)
    return Check("compat_E_E0", ok, res, detail=f"even residual {ev.residual:.3g}")


# ---- kernel constructions -------------------------------------------------------------


def _check_bond(structure: LocalStructure, n: int):
    if not 0 <= n < structure.horizon - 1:
        raise ValueError(f"bond [{n}, {n + 1}] outside horizon {structure.horizon}")


def _normalized_kraus(rng, dim: int, r: int, rank: int) -> np.ndarray:
    ks = np.array([random_matrix(rng, dim, r) for _ in range(rank)])
    y = np.einsum("iab,iac->bc", ks.conj(), ks)
    return ks @ psd_inv_sqrt(y)


def random_tensor_kernel(structure: LocalStructure, n: int, rng: np.random.Generator, rank: int = 2) -> TransitionExpectation:
    """Random unital CP kernel ``X -> sum K_i^* X K_i`` with ``sum K_i^* K_i = 1``."""
    _check_bond(structure, n)
    r = structure.block_dims[n]
    ks = _normalized_kraus(rng, r * structure.block_dims[n + 1], r, rank)
    return TransitionExpectation.from_kraus(structure, n, ks, label="random-cp")


def random_even_kernel(structure: LocalStructure, n: int, rng: np.random.Generator, rank: int = 2, unital: bool = True) -> TransitionExpectation:
    """Random even CP kernel ``X -> Y^{-1/2} P+(Phi(P+ X)) Y^{-1/2}`` with ``Y = P+(Phi(1))``.

    ``P+`` is the even projection on the respective local algebra and ``Phi`` a
    random Kraus map; without ``unital`` the normalisation is skipped.
    """
    _check_bond(structure, n)
    r = structure.block_dims[n]
    dim = r * structure.block_dims[n + 1]
    ks = np.array([random_matrix(rng, dim, r) for _ in range(rank)])
    zb, zs = structure.range_parity(n, n + 1), structure.site_parity(n)

    def phi(x):
        xp = parity_split(np.asarray(x, dtype=complex), zb)[0]
        return parity_split(np.einsum("iab,...ac,icd->...bd", ks.conj(), xp, ks, optimize=True), zs)[0]

    if unital:
        ys = psd_inv_sqrt(phi(np.eye(dim)))
        fn = lambda x: ys @ phi(x) @ ys  # noqa: E731
    else:
        fn = phi
    return TransitionExpectation.from_function(structure, n, fn, label="random-even")


def odd_perturbation(e: TransitionExpectation, rng: np.random.Generator, eps: float = 0.5) -> TransitionExpectation:
    """``E + eps F`` with ``F(X) = W^* X_- V + V^* X_- W`` (W even, V odd).

    ``F`` is a *-map with even range, so the sum keeps the Markov property
    and the *-property while failing to be even.
    """
    s = e.structure
    zb, zs = _bond_parity(e), s.site_parity(e.site)
    even_mask = np.outer(zb, zs) > 0
    w = random_matrix(rng, e.dim, e.r) * even_mask
    v = random_matrix(rng, e.dim, e.r) * ~even_mask

    def f(x):
        xm = parity_split(np.asarray(x, dtype=complex), zb)[1]
        return dagger(w) @ xm @ v + dagger(v) @ xm @ w

    return e.plus(lambda x: eps * f(x), label=f"{e.label}+odd")


def odd_range_perturbation(e: TransitionExpectation, rng: np.random.Generator, eps: float = 0.5) -> TransitionExpectation:
    """``E + eps (W^* X_- U + U^* X_- W)`` with ``W, U`` even: a *-map whose perturbation has odd range.

    On a site with a past this breaks the Markov property and evenness at once.
    """
    zb, zs = _bond_parity(e), e.structure.site_parity(e.site)
    even_mask = np.outer(zb, zs) > 0
    w = random_matrix(rng, e.dim, e.r) * even_mask
    u = random_matrix(rng, e.dim, e.r) * even_mask

    def f(x):
        xm = parity_split(np.asarray(x, dtype=complex), zb)[1]
        return dagger(w) @ xm @ u + dagger(u) @ xm @ w

    return e.plus(lambda x: eps * f(x), check_markov=False, label=f"{e.label}+odd-range")


def transpose_kernel(structure: LocalStructure, n: int, state) -> TransitionExpectation:
    """``x (x) y -> x^T tr(sigma y)``: positive but not completely positive."""
    p = product_kernel(structure, n, state)
    return TransitionExpectation.from_function(structure, n, lambda x: p.apply(x).T, label="transpose")


def product_kernel(structure: LocalStructure, n: int, state) -> TransitionExpectation:
    """``x (x) y -> x tr(sigma y)`` on a tensor bond."""
    if structure.is_fermi:
        raise PreconditionError("the product kernel is defined for tensor lattices")
    sigma = np.asarray(state, dtype=complex)
    r, r2 = structure.block_dims[n], structure.block_dims[n + 1]
    if sigma.shape != (r2, r2):
        raise ValueError(f"state must be {r2}x{r2}, got {sigma.shape}")

    def fn(x):
        return np.einsum("aibj,ji->ab", np.asarray(x).reshape(r, r2, r, r2), sigma)

    return TransitionExpectation.from_function(structure, n, fn, label="product")


def classical_kernel(structure: LocalStructure, n: int, stochastic) -> TransitionExpectation:
    """Diagonal kernel with Kraus operators ``sqrt(P_ij) |i j><i|``."""
    if structure.is_fermi:
        raise PreconditionError("the classical kernel is defined for tensor lattices")
    p = np.asarray(stochastic, dtype=float)
    r, r2 = structure.block_dims[n], structure.block_dims[n + 1]
    if p.shape != (r, r2) or np.any(p < 0):
        raise ValueError(f"transition matrix must be a nonnegative {r}x{r2} array")
    ks = []
    for i in range(r):
        for j in range(r2):
            k = np.zeros((r * r2, r), dtype=complex)
            k[i * r2 + j, i] = np.sqrt(p[i, j])
            ks.append(k)
    return TransitionExpectation.from_kraus(structure, n, ks, label="classical")


# ---- extension to the past ------------------------------------------------------------


class ExtendedQce:
    """Extension of a bond kernel to ``A_[0,n+1] -> A_[0,n]`` in prefix coordinates.

    On ordered products it is ``p q -> p E(q)`` (``p`` over sites ``< n``,
    ``q`` over ``[n, n+1]``). ``method="basis"`` applies that definition
    through a Gram-system expansion; ``method="factorized"`` uses the
    equivalent closed form obtained by splitting the input into the parts
    even and odd in ``[n, n+1]`` (tensor lattices: ``id (x) E``).
    """

    def __init__(self, kernel: TransitionExpectation, method: str = "auto"):
        self.kernel = kernel
        s = kernel.structure
        self.structure = s
        self.site = n = kernel.site
        self.tol = kernel.tol
        self.prefix_dim = s.range_dim(0, n - 1) if n >= 1 else 1
        self.r, self.r_next = kernel.r, kernel.r_next
        self.dom_dim = self.prefix_dim * kernel.dim
        self.cod_dim = self.prefix_dim * self.r
        self.prefix_parity = s.range_parity(0, n - 1)
        self.bond_parity = s.range_parity(n, n + 1)
        if method == "auto":
            method = "basis" if self.dom_dim <= 16 else "factorized"
        if method not in ("basis", "factorized"):
            raise ValueError(f"unknown method {method!r}")
        self.method = method
        zs = s.site_parity(n)
        even_out = np.kron(zs, zs) > 0
        mat = kernel.matrix
        self._plus = mat * even_out[:, None]
        self._minus = mat * ~even_out[:, None]

    def __repr__(self):
        return f"ExtendedQce(site={self.site}, {self.dom_dim} -> {self.cod_dim}, {self.method})"

    # ---- embeddings into prefix coordinates --------------------------------------------

    def embed_past(self, p, codomain: bool = False) -> np.ndarray:
        """Element of sites ``< n`` in prefix coordinates of the domain (or codomain)."""
        inner = self.r if codomain else self.kernel.dim
        return np.einsum("...ab,ij->...aibj", p, np.eye(inner)).reshape(np.shape(p)[:-2] + ((self.cod_dim if codomain else self.dom_dim),) * 2)

    def embed_bond(self, q) -> np.ndarray:
        """Element of ``[n, n+1]`` in domain prefix coordinates."""
        q = np.asarray(q, dtype=complex)
        if self.site == 0:
            return q
        return self._join_many(q, self.bond_parity, self.dom_dim)

    def embed_site(self, y) -> np.ndarray:
        """Element of site ``n`` in codomain prefix coordinates."""
        y = np.asarray(y, dtype=complex)
        if self.site == 0:
            return y
        return self._join_many(y, self.structure.site_parity(self.site), self.cod_dim)

    def _join_many(self, y, z, out_dim):
        yp, ym = parity_split(y, z)
        eye = np.eye(self.prefix_dim)
        v = np.diag(self.prefix_parity)
        out = np.einsum("ab,...ij->...aibj", eye, yp) + np.einsum("ab,...ij->...aibj", v, ym)
        return out.reshape(y.shape[:-2] + (out_dim, out_dim))

    # ---- action -------------------------------------------------------------------------

    def _blockwise(self, mat, x, din, dout):
        p = self.prefix_dim
        lead = x.shape[:-2]
        t = x.reshape(lead + (p, din, p, din))
        t = np.moveaxis(t, -3, -2)  # (..., p, p, din, din)
        y = _apply_matrix(mat, t, dout)
        y = np.moveaxis(y, -2, -3)
        return y.reshape(lead + (p * dout, p * dout))

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=complex)
        if x.shape[-2:] != (self.dom_dim, self.dom_dim):
            raise ValueError(f"input must be {self.dom_dim}x{self.dom_dim}, got {x.shape[-2:]}")
        if self.method == "basis":
            return np.tensordot(self._basis.coefficients(x), self._basis_images, axes=([-1], [0]))
        return self.apply_factorized(x)

    __call__ = apply

    def apply_factorized(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=complex)
        d, r = self.kernel.dim, self.r
        if not self.structure.is_fermi:
            return self._blockwise(self.kernel.matrix, x, d, r)
        z = np.kron(np.ones(self.prefix_dim), self.bond_parity)
        xe, xo = parity_split(x, z)
        v = np.kron(self.prefix_parity, np.ones(r))
        a_e = self._blockwise(self._plus, xe, d, r)
        b_e = self._blockwise(self._minus, xe, d, r)
        a_o = self._blockwise(self._plus, xo, d, r)
        b_o = self._blockwise(self._minus, xo, d, r)
        return a_e + v[:, None] * b_e + a_o * v[None, :] + b_o

    @cached_property
    def _basis(self) -> SpanBasis:
        elems, par, labels = self.structure.local_product_elements(0, self.site + 1)
        return SpanBasis(elems, f"B[0,{self.site + 1}]", labels=labels, parities=par, tol=self.tol, check=False)

    @cached_property
    def _basis_images(self) -> np.ndarray:
        s, n = self.structure, self.site
        bond = s.local_product_basis(n, n + 1)
        eq = self.kernel.apply(bond.elements)
        if n == 0:
            return eq
        past, _, _ = s.local_product_elements(0, n - 1)
        out = [s.join(0, n - 1, n, p, y) for p in past for y in eq]
        return np.array(out)

    @property
    def n_basis(self) -> int:
        return self.dom_dim**2

    def basis_elements(self, idx) -> np.ndarray:
        """Ordered-product basis elements of ``[0, n+1]`` by flat index, without building the whole basis."""
        idx = np.asarray(idx, dtype=int)
        s, n = self.structure, self.site
        bond = s.local_product_elements(n, n + 1)[0]
        if n == 0:
            return bond[idx]
        past = s.local_product_elements(0, n - 1)[0]
        ip, iq = np.divmod(idx, len(bond))
        p, q = past[ip], bond[iq]
        qp, qm = parity_split(q, self.bond_parity)
        pv = p * self.prefix_parity[None, None, :]
        out = np.einsum("kab,kij->kaibj", p, qp) + np.einsum("kab,kij->kaibj", pv, qm)
        return out.reshape(len(idx), self.dom_dim, self.dom_dim)

    def apply_by_basis(self, x) -> np.ndarray:
        return np.tensordot(self._basis.coefficients(np.asarray(x, dtype=complex)), self._basis_images, axes=([-1], [0]))

    def dual(self, rho) -> np.ndarray:
        """``sigma`` on the domain with ``tr(sigma x) = tr(rho E~(x))``."""
        rho = np.asarray(rho, dtype=complex)
        d, r = self.kernel.dim, self.r
        if not self.structure.is_fermi:
            return self._blockwise(_transpose_matrix(self.kernel.matrix, d, r), rho, r, d)
        at = _transpose_matrix(self._plus, d, r)
        bt = _transpose_matrix(self._minus, d, r)
        v = np.kron(self.prefix_parity, np.ones(r))
        even_part = self._blockwise(at, rho, r, d) + self._blockwise(bt, rho * v[None, :], r, d)
        odd_part = self._blockwise(at, v[:, None] * rho, r, d) + self._blockwise(bt, rho, r, d)
        z = np.kron(np.ones(self.prefix_dim), self.bond_parity)
        return parity_split(even_part, z)[0] + parity_split(odd_part, z)[1]

    # ---- derived objects ----------------------------------------------------------------

    def unit_images(self) -> np.ndarray:
        return self.apply(matrix_units(self.dom_dim))

    def transfer_matrix(self) -> np.ndarray:
        """``T`` with ``vec(E~(x)) = T vec(x)``."""
        return self.unit_images().reshape(self.dom_dim**2, -1).T

    def choi(self) -> ChoiMatrix:
        return choi_from_unit_images(self.unit_images(), f"prefix[0,{self.site + 1}]")

    def as_cpmap(self) -> CpMap:
        cod = SpanBasis(matrix_units(self.cod_dim), f"M[0,{self.site}]", check=False)
        return CpMap(self._basis, cod, self.apply(self._basis.elements), label=f"ext({self.kernel.label})", tol=self.tol, check=False)


def extend(
    e: TransitionExpectation,
    structure: LocalStructure | None = None,
    tol: ToleranceConfig | None = None,
    check: bool = True,
    verify_cp: bool | None = None,
    method: str = "auto",
) -> ExtendedQce:
    """Extend a bond kernel to the full past.

    ``check`` enforces ``E o E0 = E`` (needed for a *-map); ``verify_cp``
    (default: when the Choi matrix has size at most 512) raises if the
    extension is not completely positive.
    """
    if structure is not None and structure is not e.structure:
        e = e.at_site(e.site, structure)
    tol = tol or e.tol
    if check:
        compat = verify_compat_E_E0(e, tol=tol)
        if not compat:
            raise PreconditionError(f"E o E0 != E (residual {compat.residual:.3g}); the extension is not a *-map")
    q = ExtendedQce(e, method)
    if verify_cp is None:
        verify_cp = q.dom_dim * q.cod_dim <= 512
    if verify_cp:
        c = q.choi()
        lam = c.min_eigenvalue
        if lam < -tol.eig_tol * max(1.0, float(np.max(np.abs(c.eigenvalues)))):
            raise NotCompletelyPositiveError(
                f"extension is not completely positive (min Choi eigenvalue {lam:.3g})",
                min_eigenvalue=lam,
                witness=c.min_eigenvector,
            )
    return q


def _budget(q: ExtendedQce, limit: int) -> int:
    # keep sampled checks near a fixed amount of work as blocks grow
    return int(min(limit, max(64, 2**22 // q.dom_dim**2)))


def _pair_indices(n1: int, n2: int, limit: int, rng):
    total = n1 * n2
    if total <= limit:
        return np.arange(total)
    return rng.choice(total, size=limit, replace=False)


def verify_qce(q: ExtendedQce, tol: ToleranceConfig | None = None, samples: int = 4, seed: int = 0, limit: int = 4096) -> CheckSuite:
    """Quasi-conditional-expectation properties of an extension, with worst residuals."""
    tol = tol or q.tol
    rng = np.random.default_rng(seed)
    s, n = q.structure, q.site
    suite = CheckSuite()
    limit = _budget(q, limit)

    bond = s.local_product_basis(n, n + 1)
    lhs = q.apply(q.embed_bond(bond.elements))
    rhs = q.embed_site(q.kernel.apply(bond.elements))
    res = max_abs(lhs - rhs)
    suite.add(Check("restriction", res <= tol.eq_tol * _scale(rhs), res))

    if n >= 1:
        past, _, past_labels = s.local_product_elements(0, n - 1)
    else:
        past, past_labels = np.ones((1, 1, 1), dtype=complex), [()]
    xs = np.array([random_matrix(rng, q.dom_dim) for _ in range(samples)])
    ex = q.apply(xs)
    pick = _pair_indices(len(past), 1, max(1, limit // samples), rng)
    c_dom, c_cod = q.embed_past(past[pick])[:, None], q.embed_past(past[pick], codomain=True)[:, None]
    left = q.apply(c_dom @ xs[None])
    right = q.apply(xs[None] @ c_dom)
    res_l = max_abs(left - c_cod @ ex[None])
    res_r = max_abs(right - ex[None] @ c_cod)
    scale = _scale(ex)
    suite.add(Check("module_left", res_l <= tol.eq_tol * scale * 10, res_l))
    suite.add(Check("module_right", res_r <= tol.eq_tol * scale * 10, res_r))

    suite.add(trace_like_check(q, tol, rng, limit))
    suite.add(star_map_check(q, tol, rng, limit))

    if q.dom_dim * q.cod_dim <= 1024:
        c = q.choi()
        lam = c.min_eigenvalue
        ok = lam >= -tol.eig_tol * max(1.0, float(np.max(np.abs(c.eigenvalues))))
        suite.add(Check("completely_positive", ok, max(0.0, -lam), None if ok else c.min_eigenvector, detail="choi"))
    else:
        cp = is_completely_positive_sampled(q, tol, seed)
        suite.add(cp)

    # range inside the past joined with the admissible part of site n
    adm = orthonormal_span(s.admissible_local_basis(n).elements, q.r, tol)
    ys = q.apply(np.concatenate([xs, q.basis_elements(_pair_indices(q.n_basis, 1, limit, rng))]))
    t = ys.reshape(-1, q.prefix_dim, q.r, q.prefix_dim, q.r)
    blocks = np.moveaxis(t, 2, 3)
    coeff = np.einsum("kij,...ij->...k", adm.elements.conj(), blocks)
    proj = np.einsum("...k,kij->...ij", coeff, adm.elements)
    res = max_abs(blocks - proj)
    suite.add(Check("range", res <= tol.eq_tol * _scale(ys) * 10, res))

    # the commutant of the past is 1 (x) M in prefix coordinates, in both domain and codomain
    units = matrix_units(q.kernel.dim)
    res, scale = 0.0, 1.0
    for chunk in np.array_split(units, max(1, len(units) * q.dom_dim**2 // 2**20)):
        out = q.apply(np.einsum("ab,kij->kaibj", np.eye(q.prefix_dim), chunk).reshape(-1, q.dom_dim, q.dom_dim))
        t = out.reshape(-1, q.prefix_dim, q.r, q.prefix_dim, q.r)
        inner = np.einsum("kaiaj->kij", t) / q.prefix_dim
        target = np.einsum("ab,kij->kaibj", np.eye(q.prefix_dim), inner).reshape(out.shape)
        res, scale = max(res, max_abs(out - target)), max(scale, max_abs(out))
    suite.add(Check("commutant_preserved", res <= tol.eq_tol * scale * 10, res))
    return suite


def trace_like_check(q: ExtendedQce, tol: ToleranceConfig | None = None, rng=None, limit: int = 4096) -> Check:
    """``E~(ab) = E~(ba)`` for ``a`` over sites ``< n`` and ``b`` over ``[n, n+1]``."""
    tol = tol or q.tol
    rng = rng or np.random.default_rng(0)
    limit = _budget(q, limit)
    s, n = q.structure, q.site
    if n == 0:
        return Check("trace_like", True, 0.0, detail="no past sites")
    past, _, past_labels = s.local_product_elements(0, n - 1)
    bond = s.local_product_basis(n, n + 1)
    a = q.embed_past(past)
    b = q.embed_bond(bond.elements)
    idx = _pair_indices(len(a), len(b), limit, rng)
    ia, ib = np.divmod(idx, len(b))
    worst, witness, scale = 0.0, None, 1.0
    for chunk in np.array_split(np.arange(len(idx)), max(1, len(idx) * q.dom_dim**2 // 2**20)):
        ab = a[ia[chunk]] @ b[ib[chunk]]
        ba = b[ib[chunk]] @ a[ia[chunk]]
        la, lb = q.apply(ab), q.apply(ba)
        per = np.max(np.abs(la - lb), axis=(-2, -1))
        scale = max(scale, max_abs(la))
        j = int(np.argmax(per))
        if per[j] > worst:
            worst, witness = float(per[j]), (past_labels[ia[chunk][j]], bond.labels[ib[chunk][j]])
    ok = worst <= tol.eq_tol * scale * 10
    return Check("trace_like", ok, worst, None if ok else witness)


def star_map_check(q: ExtendedQce, tol: ToleranceConfig | None = None, rng=None, limit: int = 4096) -> Check:
    """``E~(x^*) = E~(x)^*`` over the ordered-product basis of ``[0, n+1]``."""
    tol = tol or q.tol
    rng = rng or np.random.default_rng(0)
    x = q.basis_elements(_pair_indices(q.n_basis, 1, _budget(q, limit), rng))
    y = q.apply(x)
    res = max_abs(q.apply(dagger(x)) - dagger(y))
    return Check("star_map", res <= tol.eq_tol * _scale(y) * 10, res)


def is_completely_positive_sampled(q: ExtendedQce, tol: ToleranceConfig, seed: int = 0, samples: int = 50) -> Check:
    """Block positivity of ``[E~(a_j^* a_k)]`` over random families, for extensions too large for a Choi test."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    for t in range(samples):
        m = 1 + t % 4
        a = np.array([random_matrix(rng, q.dom_dim, 1) @ dagger(random_matrix(rng, q.dom_dim, 1)) for _ in range(m)])
        prods = (dagger(a)[:, None] @ a[None]).reshape(-1, q.dom_dim, q.dom_dim)
        blocks = q.apply(prods).reshape(m, m, q.cod_dim, q.cod_dim)
        big = np.einsum("jkab->jakb", blocks).reshape(m * q.cod_dim, m * q.cod_dim)
        lam = float(np.linalg.eigvalsh((big + dagger(big)) / 2)[0]) / _scale(big)
        worst = min(worst, lam)
    return Check("completely_positive", worst >= -tol.eig_tol, max(0.0, -worst), detail="sampled")
