"""Finite truncations of tensor and CAR lattices as concrete matrix algebras.

Two coordinate systems are used.

* Ambient coordinates: the full horizon, dimension ``ambient_dim``.
* Local coordinates of a contiguous site range ``[m, n]``: a full matrix
  algebra of dimension ``range_dim(m, n)``. For tensor lattices this is the
  obvious tensor factor. For Fermi lattices it is the Jordan-Wigner picture
  built from the modes of the range alone; ``RangeUnits`` maps it
  *-isomorphically onto the range subalgebra of the ambient algebra by
  dressing odd elements with the parity of the modes to the left.

Fermi conventions: one mode is ``M_2`` with ``sigma_z = diag(-1, 1)``; basis
index 0 is the occupied state, so ``a = e_21``, ``a^+ = e_12`` and
``a^+ a = e_11``. Sites are consecutive blocks of modes in global order.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from itertools import combinations_with_replacement
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .checks import Check, CheckSuite, max_abs
from .errors import CARViolationError, DependentBasisError, DimensionCapError, InvariantViolation
from .linalg import (
    DEFAULT_TOL,
    SpanBasis,
    ToleranceConfig,
    commutant_of,
    spans_equal,
)

SIGMA_Z = np.diag([-1.0, 1.0]).astype(complex)
E11 = np.array([[1, 0], [0, 0]], dtype=complex)
E12 = np.array([[0, 1], [0, 0]], dtype=complex)
E21 = np.array([[0, 0], [1, 0]], dtype=complex)
E22 = np.array([[0, 0], [0, 1]], dtype=complex)
I2 = np.eye(2, dtype=complex)

# per-mode spanning families: (label, operator, parity)
MODE_FAMILIES = {
    "standard": (("1", I2, 1), ("a", E21, -1), ("a+", E12, -1), ("a+a", E11, 1)),
    "ladder": (("a", E21, -1), ("a+", E12, -1), ("aa+", E22, 1), ("a+a", E11, 1)),
    "hermitian": (
        ("1", I2, 1),
        ("a+a+", E21 + E12, -1),
        ("i(a+-a)", 1j * (E12 - E21), -1),
        ("sz", SIGMA_Z, 1),
    ),
}

DEFAULT_CAP = 4096


class Kind(str, Enum):
    TENSOR = "tensor"
    FERMI = "fermi"


@dataclass(frozen=True)
class LatticeSpec:
    """Lattice shape: ``site_dims`` are matrix sizes (tensor) or mode counts (Fermi).

    A single ``site_dims`` entry is replicated over the horizon.
    """

    kind: Kind
    site_dims: tuple[int, ...]
    horizon: int
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if int(self.horizon) < 1:
            raise ValueError(f"horizon must be at least 1, got {self.horizon}")
        object.__setattr__(self, "horizon", int(self.horizon))
        dims = tuple(int(d) for d in self.site_dims)
        if len(dims) == 1:
            dims = dims * self.horizon
        if len(dims) != self.horizon:
            raise ValueError(f"{len(dims)} site dimensions given for horizon {self.horizon}")
        if any(d < 1 for d in dims):
            raise ValueError(f"site dimensions must be positive, got {dims}")
        object.__setattr__(self, "site_dims", dims)
        if self.ambient_dim > self.cap:
            raise DimensionCapError(
                f"ambient dimension {self.ambient_dim} exceeds the cap {self.cap}"
            )

    def block_dim(self, n: int) -> int:
        d = self.site_dims[n]
        return d if self.kind is Kind.TENSOR else 2**d

    @property
    def block_dims(self) -> tuple[int, ...]:
        return tuple(self.block_dim(n) for n in range(self.horizon))

    @property
    def ambient_dim(self) -> int:
        if self.kind is Kind.TENSOR:
            return int(np.prod(self.site_dims, dtype=object))
        return 2 ** sum(self.site_dims)


def parity_split(x: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Even and odd parts of ``x`` under conjugation by the diagonal unitary ``z``."""
    conj = z[:, None] * x * z[None, :]
    return (x + conj) / 2, (x - conj) / 2


def _mode_monomials(choices: Sequence[Sequence[tuple[np.ndarray, int]]]):
    """Ordered products of per-mode operators in the Jordan-Wigner picture.

    ``choices[j]`` lists ``(operator, parity)`` options for mode ``j``. The
    ordered product ``o_0 o_1 ... o_{M-1}`` factorises as
    ``kron_j(o_j sigma_z^{r_j})`` with ``r_j`` the parity of the factors to
    the right, which is what is assembled here (first mode slowest).
    """
    elems = np.ones((1, 1, 1), dtype=complex)
    par = np.ones(1, dtype=int)
    for opts in reversed(choices):
        blocks, pars = [], []
        odd_suffix = (par == -1)[:, None, None]
        for op, p in opts:
            f = np.where(odd_suffix, (op @ SIGMA_Z)[None], op[None])
            k, d = elems.shape[0], elems.shape[1]
            blocks.append(np.einsum("kab,kcd->kacbd", f, elems).reshape(k, 2 * d, 2 * d))
            pars.append(par * p)
        elems = np.concatenate(blocks)
        par = np.concatenate(pars)
    return elems, par


def _kron_stack(stacks: Sequence[np.ndarray]) -> np.ndarray:
    out = np.ones((1, 1, 1), dtype=complex)
    for s in stacks:
        k, d = out.shape[0], out.shape[1]
        j, e = s.shape[0], s.shape[1]
        out = np.einsum("kab,jcd->kjacbd", out, s).reshape(k * j, d * e, d * e)
    return out


def _tensor_site_family(d: int, variant: str):
    if variant in ("standard", "ladder", "units"):
        mats, labels = [], []
        for k in range(d):
            for l in range(d):
                e = np.zeros((d, d), dtype=complex)
                e[k, l] = 1
                mats.append(e)
                labels.append(f"e{k}{l}")
        return np.array(mats), labels
    if variant == "hermitian":
        mats, labels = [], []
        for k, l in combinations_with_replacement(range(d), 2):
            e = np.zeros((d, d), dtype=complex)
            if k == l:
                e[k, k] = 1
                mats.append(e)
                labels.append(f"h{k}{k}")
            else:
                e[k, l] = e[l, k] = 1
                f = np.zeros((d, d), dtype=complex)
                f[k, l], f[l, k] = 1j, -1j
                mats += [e, f]
                labels += [f"s{k}{l}", f"a{k}{l}"]
        return np.array(mats), labels
    raise ValueError(f"unknown basis variant {variant!r}")


class RangeUnits:
    """*-isomorphism between local coordinates of ``[m, n]`` and the ambient range subalgebra."""

    def __init__(self, structure: "LocalStructure", m: int, n: int):
        self.structure = structure
        self.m, self.n = m, n
        dims = structure.block_dims
        self.left = int(np.prod(dims[:m], dtype=int))
        self.dim = int(np.prod(dims[m : n + 1], dtype=int))
        self.right = int(np.prod(dims[n + 1 :], dtype=int))
        self.fermi = structure.kind is Kind.FERMI
        self.left_parity = structure.range_parity(0, m - 1)
        self.parity = structure.range_parity(m, n)

    def embed(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        eye_l, eye_r = np.eye(self.left), np.eye(self.right)
        lead = z.shape[:-2]
        if not self.fermi:
            out = np.einsum("ab,...ij,cd->...aicbjd", eye_l, z, eye_r)
        else:
            zp, zm = parity_split(z, self.parity)
            out = np.einsum("ab,...ij,cd->...aicbjd", eye_l, zp, eye_r)
            out += np.einsum("ab,...ij,cd->...aicbjd", np.diag(self.left_parity), zm, eye_r)
        d = self.left * self.dim * self.right
        return out.reshape(lead + (d, d))

    def extract(self, x) -> np.ndarray:
        """Inverse of ``embed`` on its image (normalised partial trace otherwise)."""
        x = np.asarray(x, dtype=complex)
        lead = x.shape[:-2]
        t = x.reshape(lead + (self.left, self.dim, self.right) * 2)
        scale = self.left * self.right
        plus = np.einsum("...aibajb->...ij", t) / scale
        if not self.fermi:
            return plus
        minus = np.einsum("a,...aibajb->...ij", self.left_parity, t) / scale
        return parity_split(plus, self.parity)[0] + parity_split(minus, self.parity)[1]

    def residual(self, x) -> float:
        """How far ``x`` is from the range subalgebra."""
        return max_abs(x - self.embed(self.extract(x)))

    @cached_property
    def units(self) -> np.ndarray:
        return self.embed(np.eye(self.dim * self.dim, dtype=complex).reshape(-1, self.dim, self.dim))


@dataclass(frozen=True)
class ParityOperator:
    """Self-adjoint diagonal unitary implementing the parity of a set of sites."""

    sites: frozenset
    diagonal: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.diagonal).astype(complex)

    def conjugate(self, x) -> np.ndarray:
        v = self.diagonal
        return v[:, None] * np.asarray(x) * v[None, :]


class LocalStructure:
    """Matrix realisation of the lattice algebra truncated to ``spec.horizon`` sites.

    Ambient-dimension objects (dense generators, embedded bases) are built on
    demand; generator checks run on sparse matrices so they stay cheap near
    the dimension cap.
    """

    def __init__(self, spec: LatticeSpec, tol: ToleranceConfig = DEFAULT_TOL):
        self.spec = spec
        self.tol = tol
        self.kind = spec.kind
        self.horizon = spec.horizon
        self.block_dims = spec.block_dims
        self.ambient_dim = spec.ambient_dim
        self.site_dims = spec.site_dims
        offsets = np.concatenate([[0], np.cumsum(spec.site_dims)]).astype(int)
        self._mode_offsets = offsets if self.kind is Kind.FERMI else None
        self._truncations: dict[int, LocalStructure] = {}

    def __repr__(self):
        return (
            f"LocalStructure({self.kind.value}, site_dims={list(self.site_dims)}, "
            f"ambient_dim={self.ambient_dim})"
        )

    @property
    def is_fermi(self) -> bool:
        return self.kind is Kind.FERMI

    # ---- modes and local coordinates -------------------------------------------------

    @property
    def n_modes(self) -> int:
        return int(self._mode_offsets[-1]) if self.is_fermi else 0

    def site_modes(self, n: int) -> range:
        self._check_site(n)
        if not self.is_fermi:
            return range(0)
        return range(int(self._mode_offsets[n]), int(self._mode_offsets[n + 1]))

    def _check_site(self, n: int):
        if not 0 <= n < self.horizon:
            raise IndexError(f"site {n} outside horizon [0, {self.horizon - 1}]")

    def _check_range(self, m: int, n: int):
        if not (0 <= m <= n < self.horizon):
            raise IndexError(f"site range [{m}, {n}] outside horizon [0, {self.horizon - 1}]")

    def range_dim(self, m: int, n: int) -> int:
        return int(np.prod(self.block_dims[m : n + 1], dtype=int))

    def range_parity(self, m: int, n: int) -> np.ndarray:
        """Diagonal of the local parity unitary of ``[m, n]`` (all ones for tensor lattices)."""
        if n < m:
            return np.ones(1)
        dim = self.range_dim(m, n)
        if not self.is_fermi:
            return np.ones(dim)
        modes = int(self._mode_offsets[n + 1] - self._mode_offsets[m])
        z = np.ones(1)
        for _ in range(modes):
            z = np.kron(z, [-1.0, 1.0])
        return z

    def site_parity(self, n: int) -> np.ndarray:
        return self.range_parity(n, n)

    def range_units(self, m: int, n: int) -> RangeUnits:
        self._check_range(m, n)
        return RangeUnits(self, m, n)

    def join(self, m: int, k: int, n: int, x, y) -> np.ndarray:
        """Product ``x y`` in local coordinates of ``[m, n]``, for ``x`` on ``[m, k]`` and ``y`` on ``[k+1, n]``."""
        x = np.asarray(x, dtype=complex)
        y = np.asarray(y, dtype=complex)
        if not self.is_fermi:
            return np.kron(x, y)
        yp, ym = parity_split(y, self.range_parity(k + 1, n))
        zx = x * self.range_parity(m, k)[None, :]
        return np.kron(x, yp) + np.kron(zx, ym)

    def local_product(self, n: int, z, x) -> np.ndarray:
        """Product of a site-``n`` element with a site-``n+1`` element, in ``[n, n+1]`` coordinates."""
        return self.join(n, n, n + 1, z, x)

    def local_product_matrix(self, n: int, z) -> np.ndarray:
        """Matrix of ``x -> local_product(n, z, x)`` acting on row-major ``vec(x)``."""
        r = self.block_dims[n + 1]
        units = np.eye(r * r, dtype=complex).reshape(-1, r, r)
        cols = np.array([self.local_product(n, z, u).reshape(-1) for u in units])
        return cols.T

    # ---- bases in local coordinates --------------------------------------------------

    def local_product_elements(self, m: int, n: int, variant: str = "standard"):
        """Elements, parities and labels of the ordered-product basis of ``[m, n]`` (earlier sites slowest)."""
        self._check_range(m, n)
        if self.is_fermi:
            fam = MODE_FAMILIES[variant]
            first, last = int(self._mode_offsets[m]), int(self._mode_offsets[n + 1])
            choices = [[(op, p) for _, op, p in fam]] * (last - first)
            elems, par = _mode_monomials(choices)
            per_site = [4 ** self.site_dims[s] for s in range(m, n + 1)]
        else:
            stacks = [_tensor_site_family(self.site_dims[s], variant)[0] for s in range(m, n + 1)]
            elems = _kron_stack(stacks)
            par = np.ones(elems.shape[0], dtype=int)
            per_site = [len(s) for s in stacks]
        labels = list(np.ndindex(*per_site))
        return elems, par, labels

    def local_site_labels(self, n: int, variant: str = "standard") -> list[str]:
        if self.is_fermi:
            names = [lab for lab, _, _ in MODE_FAMILIES[variant]]
            d = self.site_dims[n]
            return [".".join(names[i] for i in t) for t in np.ndindex(*(4,) * d)]
        return _tensor_site_family(self.site_dims[n], variant)[1]

    def local_product_basis(self, m: int, n: int, variant: str = "standard", parity: int | None = None) -> SpanBasis:
        elems, par, labels = self.local_product_elements(m, n, variant)
        basis = SpanBasis(
            elems,
            f"B[{m},{n}]/{variant}",
            labels=labels,
            parities=par,
            tol=self.tol,
            check=False,
        )
        if parity is not None:
            basis = basis.select(par == parity, f"B[{m},{n}]/{variant}/{'+' if parity > 0 else '-'}")
        return basis

    def local_site_basis(self, n: int, variant: str = "standard", parity: int | None = None) -> SpanBasis:
        return self.local_product_basis(n, n, variant, parity)

    def admissible_local_basis(self, n: int) -> SpanBasis:
        """Commutant of the past intersected with site ``n``, in site-local coordinates.

        All of the site algebra for tensor lattices and for ``n = 0``;
        the even part of the site algebra for Fermi sites ``n >= 1``.
        """
        if self.is_fermi and n >= 1:
            return self.local_site_basis(n, parity=1)
        return self.local_site_basis(n)

    def local_annihilator(self, n: int, mode: int = 0) -> np.ndarray:
        """Annihilator of the ``mode``-th mode of site ``n`` in site-local coordinates."""
        d = self.site_dims[n]
        if not self.is_fermi or not 0 <= mode < d:
            raise ValueError(f"site {n} has no fermionic mode {mode}")
        factors = [SIGMA_Z] * mode + [E21] + [I2] * (d - mode - 1)
        out = np.ones((1, 1), dtype=complex)
        for f in factors:
            out = np.kron(out, f)
        return out

    # ---- ambient generators ---------------------------------------------------------

    def _sparse_annihilator(self, j: int) -> sp.csr_matrix:
        # sigma_z on modes before j, e21 on mode j; mode 0 is the most significant bit
        m = self.n_modes
        idx = np.arange(2**m)
        bits = (idx[:, None] >> (m - 1 - np.arange(j + 1))) & 1
        src = idx[bits[:, j] == 0]
        sign = np.where(bits[bits[:, j] == 0, :j] == 1, 1.0, -1.0).prod(axis=1)
        dst = src | (1 << (m - 1 - j))
        return sp.csr_matrix((sign.astype(complex), (dst, src)), shape=(2**m, 2**m))

    def range_parity_modes(self, j: int) -> np.ndarray:
        z = np.ones(1)
        for _ in range(j):
            z = np.kron(z, [-1.0, 1.0])
        return z

    @cached_property
    def _sparse_annihilators(self) -> list:
        return [self._sparse_annihilator(j) for j in range(self.n_modes)]

    def _sparse_site_generators(self, n: int) -> list:
        if self.is_fermi:
            ann = [self._sparse_annihilators[j] for j in self.site_modes(n)]
            return ann + [a.getH().tocsr() for a in ann]
        d = self.block_dims[n]
        left = sp.identity(int(np.prod(self.block_dims[:n], dtype=int)))
        right = sp.identity(int(np.prod(self.block_dims[n + 1 :], dtype=int)))
        gens = []
        for k in range(d):
            for l in range(d):
                e = sp.csr_matrix(([1.0], ([k], [l])), shape=(d, d))
                gens.append(sp.kron(sp.kron(left, e), right, format="csr"))
        return gens

    def annihilator(self, j: int) -> np.ndarray:
        if not self.is_fermi:
            raise ValueError("tensor lattices have no fermionic modes")
        return self._sparse_annihilators[j].toarray().astype(complex)

    def creator(self, j: int) -> np.ndarray:
        return self.annihilator(j).conj().T

    def site_generators(self, n: int) -> list[np.ndarray]:
        """Dense ambient generators of site ``n``: ``a_j, a_j^+`` (Fermi) or matrix units (tensor)."""
        self._check_site(n)
        return [g.toarray().astype(complex) for g in self._sparse_site_generators(n)]

    def car_residual(self) -> float:
        """Worst violation of the canonical anticommutation relations."""
        return self._car_residual

    @cached_property
    def _car_residual(self) -> float:
        ann = self._sparse_annihilators
        if self.ambient_dim <= 256:
            # small lattices: all pairs at once, dense beats sparse overhead here
            a = np.array([x.toarray() for x in ann])
            ah = a.conj().transpose(0, 2, 1)
            aa = a[:, None] @ a[None, :]
            r1 = aa + aa.transpose(1, 0, 2, 3)
            r2 = ah[:, None] @ a[None, :] + a[None, :] @ ah[:, None]
            r2 -= np.eye(len(ann))[:, :, None, None] * np.eye(self.ambient_dim)
            return float(max(np.abs(r1).max(initial=0.0), np.abs(r2).max(initial=0.0)))
        eye = sp.identity(self.ambient_dim, format="csr")
        worst = 0.0
        for j in range(len(ann)):
            for k in range(j, len(ann)):
                aj, ak = ann[j], ann[k]
                r1 = aj @ ak + ak @ aj
                r2 = aj.getH() @ ak + ak @ aj.getH() - (eye if j == k else 0 * eye)
                for r in (r1, r2):
                    if r.nnz:
                        worst = max(worst, float(np.max(np.abs(r.data))))
        return worst

    def site_commutation_residual(self) -> float:
        """Worst commutator between generators of distinct sites (tensor lattices)."""
        worst = 0.0
        gens = [self._sparse_site_generators(n) for n in range(self.horizon)]
        for s in range(self.horizon):
            for t in range(s + 1, self.horizon):
                for g in gens[s]:
                    for h in gens[t]:
                        c = g @ h - h @ g
                        if c.nnz:
                            worst = max(worst, float(np.max(np.abs(c.data))))
        return worst

    def verify(self) -> CheckSuite:
        suite = CheckSuite()
        if self.is_fermi:
            res = self.car_residual()
            suite.add(Check("car", res <= self.tol.eq_tol, res))
        else:
            res = self.site_commutation_residual()
            suite.add(Check("site_commutation", res <= self.tol.eq_tol, res))
        for n in range(self.horizon):
            expected = self.block_dims[n] ** 2
            if expected <= 256:
                basis, how = self.local_site_basis(n), "full Gram"
            else:
                # o_j sigma_z^p (x) rest is independent iff the per-mode (per-factor) family is
                fam = MODE_FAMILIES["standard"] if self.is_fermi else None
                mats = np.array([op for _, op, _ in fam]) if fam else _tensor_site_family(self.site_dims[n], "standard")[0]
                basis, how = SpanBasis(mats, check=False), "factor family"
            try:
                basis.check_independent()
                count = 4 ** self.site_dims[n] if self.is_fermi else len(basis)
                ok = count == expected
            except DependentBasisError:
                ok = False
            suite.add(Check(f"site_basis_{n}", ok, 0.0, detail=f"{expected} elements, {how}"))
        return suite

    # ---- parity ---------------------------------------------------------------------

    def parity_operator(self, sites: Iterable[int] | None = None) -> ParityOperator:
        """``v_J`` for the sites ``J`` (all sites when omitted); identity on tensor lattices."""
        sites = frozenset(range(self.horizon) if sites is None else sites)
        for s in sites:
            self._check_site(s)
        if not self.is_fermi:
            return ParityOperator(sites, np.ones(self.ambient_dim))
        v = np.ones(1)
        for s in range(self.horizon):
            f = self.site_parity(s) if s in sites else np.ones(self.block_dims[s])
            v = np.kron(v, f)
        return ParityOperator(sites, v)

    @cached_property
    def parity_v(self) -> np.ndarray:
        return self.parity_operator().matrix

    def theta(self, sites, x) -> np.ndarray:
        """Parity automorphism of the sites ``sites`` applied to an ambient element."""
        return self.parity_operator(sites).conjugate(x)

    def even_projection(self, sites, x) -> np.ndarray:
        return (np.asarray(x) + self.theta(sites, x)) / 2

    # ---- ambient bases --------------------------------------------------------------

    def product_basis(self, m: int, n: int, variant: str = "standard", parity: int | None = None) -> SpanBasis:
        """Ordered-product basis of the range ``[m, n]`` embedded in ambient coordinates."""
        local = self.local_product_basis(m, n, variant, parity)
        elems = self.range_units(m, n).embed(local.elements)
        return SpanBasis(
            elems,
            local.label,
            ambient_dim=self.ambient_dim,
            labels=local.labels,
            parities=local.parities,
            tol=self.tol,
            check=True,
        )

    def site_basis(self, n: int, variant: str = "standard") -> SpanBasis:
        return self.product_basis(n, n, variant)

    def commutant_intersection(self, n: int) -> SpanBasis:
        """Ambient basis of the commutant of sites ``[0, n-1]`` intersected with site ``n``."""
        local = self.admissible_local_basis(n)
        elems = self.range_units(n, n).embed(local.elements)
        return SpanBasis(elems, f"A'[0,{n - 1}]^A[{n}]", ambient_dim=self.ambient_dim, tol=self.tol, check=False)

    def algebra_generators(self, sites: Iterable[int]) -> list[np.ndarray]:
        return [g for s in sorted(set(sites)) for g in self.site_generators(s)]

    def commutant_formula(self, sites: Iterable[int], validate: bool | None = None) -> SpanBasis:
        """Closed-form commutant of the subalgebra generated by ``sites``.

        Fermi: even elements of the complement plus ``v_J`` times odd elements
        of the complement. Tensor: the complementary tensor factors. When
        ``validate`` is true (default for ambient dimension at most 32) the
        result is compared against the numerical commutant.
        """
        sites = frozenset(sites)
        for s in sites:
            self._check_site(s)
        if self.is_fermi:
            fam = MODE_FAMILIES["standard"]
            choices = []
            for s in range(self.horizon):
                opts = [(I2, 1)] if s in sites else [(op, p) for _, op, p in fam]
                choices += [opts] * self.site_dims[s]
            elems, par = _mode_monomials(choices)
            v = self.parity_operator(sites).diagonal
            odd = par == -1
            elems[odd] = v[None, :, None] * elems[odd]
        else:
            stacks = []
            for s in range(self.horizon):
                d = self.block_dims[s]
                stacks.append(np.eye(d, dtype=complex)[None] if s in sites else _tensor_site_family(d, "units")[0])
            elems = _kron_stack(stacks)
        basis = SpanBasis(elems, f"formula-commutant{sorted(sites)}", ambient_dim=self.ambient_dim, tol=self.tol, check=False)
        if validate is None:
            validate = self.ambient_dim <= 32
        if validate:
            numeric = commutant_of(self.algebra_generators(sites), self.ambient_dim, self.tol)
            same, res = spans_equal(basis, numeric, self.tol)
            if not same:
                raise InvariantViolation(
                    f"commutant formula disagrees with the numerical commutant for sites "
                    f"{sorted(sites)} (dims {len(basis)} vs {len(numeric)}, residual {res:.3g})"
                )
        return basis

    # ---- truncation -----------------------------------------------------------------

    def truncated(self, horizon: int) -> "LocalStructure":
        """Structure of the first ``horizon`` sites; its ambient algebra is the prefix algebra."""
        if not 1 <= horizon <= self.horizon:
            raise IndexError(f"cannot truncate horizon {self.horizon} to {horizon}")
        if horizon == self.horizon:
            return self
        if horizon not in self._truncations:
            spec = LatticeSpec(self.kind, self.site_dims[:horizon], horizon, self.spec.cap)
            self._truncations[horizon] = LocalStructure(spec, self.tol)
        return self._truncations[horizon]


def build_lattice(spec: LatticeSpec, tol: ToleranceConfig = DEFAULT_TOL) -> LocalStructure:
    """Construct and verify a lattice; raises on any structural inconsistency."""
    structure = LocalStructure(spec, tol)
    suite = structure.verify()
    if structure.is_fermi and not suite["car"]:
        raise CARViolationError(f"CAR residual {suite['car'].residual:.3g}")
    if not suite.passed:
        names = ", ".join(c.name for c in suite.failures)
        raise InvariantViolation(f"lattice self-check failed: {names}")
    return structure
