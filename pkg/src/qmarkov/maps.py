"""Linear maps between spans of matrices and their positivity certificates."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Any, Callable, Sequence

import numpy as np
import scipy.linalg as sla

from .checks import Check, CheckSuite, max_abs
from .errors import (
    CommutantError,
    InvariantViolation,
    NoMatrixUnitsError,
    NormalizationError,
    NotInSpanError,
    PreconditionError,
)
from .linalg import (
    DEFAULT_TOL,
    SpanBasis,
    ToleranceConfig,
    dagger,
    intersect_spans,
    matrix_units,
    null_space,
    orthonormal_span,
    psd_inv_sqrt,
    random_matrix,
    spans_equal,
    span_residual,
)


def _scale(x) -> float:
    return max(1.0, max_abs(x))


class CpMap:
    """A linear map given by the images of a domain basis.

    ``domain_units`` optionally registers a matrix-unit system ``u_kl`` of a
    full matrix algebra spanned by the domain (stacked row-major over
    ``(k, l)``); it is what ``choi`` uses. Domains that span all of ``M_D``
    get the standard matrix units automatically.
    """

    def __init__(
        self,
        domain: SpanBasis,
        codomain: SpanBasis,
        images,
        *,
        domain_units=None,
        label: str = "",
        even: bool | None = None,
        tol: ToleranceConfig = DEFAULT_TOL,
        check: bool = True,
    ):
        images = np.asarray(images, dtype=complex)
        if images.size == 0:
            images = np.zeros((0, codomain.ambient_dim, codomain.ambient_dim), dtype=complex)
        if images.shape != (len(domain), codomain.ambient_dim, codomain.ambient_dim):
            raise ValueError(
                f"expected {len(domain)} images of size {codomain.ambient_dim}, got {images.shape}"
            )
        if check and len(images):
            res = max_abs(images - codomain.synthesize(codomain.coefficients(images)))
            if res > tol.eq_tol * _scale(images):
                raise NotInSpanError(f"images leave span({codomain.label}) (residual {res:.3g})", residual=res)
        images.setflags(write=False)
        self.domain = domain
        self.codomain = codomain
        self.images = images
        self.label = label
        self.even = even
        self.verified_cp: bool | None = None
        self.tol = tol
        if domain_units is None and len(domain) == domain.ambient_dim**2:
            domain_units = matrix_units(domain.ambient_dim)
        self.domain_units = None if domain_units is None else np.asarray(domain_units, dtype=complex)

    def __repr__(self):
        return f"CpMap({self.label!r}, {self.domain.ambient_dim} -> {self.codomain.ambient_dim})"

    # ---- constructors ---------------------------------------------------------------

    @classmethod
    def from_function(cls, fn: Callable, domain: SpanBasis, codomain: SpanBasis, **kw) -> "CpMap":
        images = np.array([fn(b) for b in domain.elements]) if len(domain) else []
        return cls(domain, codomain, images, **kw)

    @classmethod
    def from_kraus(cls, kraus: Sequence, domain: SpanBasis, codomain: SpanBasis, **kw) -> "CpMap":
        """``X -> sum_i K_i^* X K_i`` with each ``K_i`` of shape (domain dim, codomain dim)."""
        ks = np.asarray(kraus, dtype=complex)
        if ks.ndim == 2:
            ks = ks[None]
        if ks.shape[1:] != (domain.ambient_dim, codomain.ambient_dim):
            raise ValueError(
                f"Kraus operators must have shape ({domain.ambient_dim}, {codomain.ambient_dim}), got {ks.shape[1:]}"
            )
        images = np.einsum("iab,kac,icd->kbd", ks.conj(), domain.elements, ks)
        return cls(domain, codomain, images, **kw)

    @classmethod
    def identity(cls, basis: SpanBasis, **kw) -> "CpMap":
        return cls(basis, basis, basis.elements, check=False, **kw)

    # ---- action ---------------------------------------------------------------------

    def coefficients(self, x, check: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=complex)
        c = self.domain.coefficients(x)
        if check:
            res = max_abs(x - self.domain.synthesize(c))
            if res > self.tol.eq_tol * _scale(x):
                raise NotInSpanError(f"input outside span({self.domain.label}) (residual {res:.3g})", residual=res)
        return c

    def apply(self, x, check: bool = True) -> np.ndarray:
        """Linear extension of the basis action; accepts stacks ``(..., D, D)``."""
        x = np.asarray(x, dtype=complex)
        if x.shape[-2:] != (self.domain.ambient_dim,) * 2:
            raise ValueError(f"input has shape {x.shape[-2:]}, domain ambient is {self.domain.ambient_dim}")
        return np.tensordot(self.coefficients(x, check), self.images, axes=([-1], [0]))

    __call__ = apply

    def compose(self, inner: "CpMap") -> "CpMap":
        """``self o inner``."""
        return CpMap(
            inner.domain,
            self.codomain,
            self.apply(inner.images),
            domain_units=inner.domain_units,
            label=f"{self.label}o{inner.label}",
            tol=self.tol,
            check=False,
        )

    def scaled(self, factor: float) -> "CpMap":
        return CpMap(self.domain, self.codomain, factor * self.images, domain_units=self.domain_units,
                     label=f"{factor}*{self.label}", even=self.even, tol=self.tol, check=False)

    @cached_property
    def local_matrix(self) -> np.ndarray:
        """Matrix ``M`` with ``vec(P(X)) = M vec(X)``; needs a domain spanning all of ``M_D``."""
        d = self.domain.ambient_dim
        if len(self.domain) != d * d:
            raise PreconditionError("local_matrix requires a domain spanning the full matrix algebra")
        c = self.domain.coefficients(matrix_units(d))
        return (c @ self.images.reshape(len(self.domain), -1)).T

    # ---- measured flags -------------------------------------------------------------

    def identity_residual(self) -> float:
        d = self.domain.ambient_dim
        one = np.eye(d)
        if not self.domain.contains(one):
            return float("inf")
        out = self.apply(one)
        return max_abs(out - np.eye(out.shape[0]))

    @property
    def identity_preserving(self) -> bool:
        return self.identity_residual() <= self.tol.eq_tol

    def star_residual(self) -> float:
        """Worst ``|P(b^*) - P(b)^*|`` over the domain basis."""
        if len(self.domain) == 0:
            return 0.0
        adj = self.apply(dagger(self.domain.elements), check=False)
        return max_abs(adj - dagger(self.images))

    def is_star_map(self) -> Check:
        res = self.star_residual()
        return Check("star_map", res <= self.tol.eq_tol * _scale(self.images), res)


@dataclass
class ChoiMatrix:
    """``sum_kl P(u_kl) (x) e_kl``; rows are indexed by (codomain index, unit row)."""

    matrix: np.ndarray
    basis_tag: str
    output_dim: int
    input_dim: int

    @cached_property
    def eigh(self):
        h = (self.matrix + dagger(self.matrix)) / 2
        return sla.eigh(h)

    @property
    def hermitian_residual(self) -> float:
        return max_abs(self.matrix - dagger(self.matrix))

    @property
    def min_eigenvalue(self) -> float:
        return float(self.eigh[0][0])

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.eigh[0]

    @property
    def min_eigenvector(self) -> np.ndarray:
        return self.eigh[1][:, 0]


def choi_from_unit_images(images: np.ndarray, tag: str = "matrix-units") -> ChoiMatrix:
    """Choi matrix from the images of the ``R*R`` matrix units, stacked row-major."""
    images = np.asarray(images)
    r = int(round(np.sqrt(images.shape[0])))
    dc = images.shape[-1]
    blocks = images.reshape(r, r, dc, dc)
    mat = np.einsum("klab->akbl", blocks).reshape(dc * r, dc * r)
    return ChoiMatrix(mat, tag, dc, r)


def choi(p: CpMap) -> ChoiMatrix:
    if p.domain_units is None:
        raise NoMatrixUnitsError(f"map {p.label!r} has no registered matrix-unit system")
    return choi_from_unit_images(p.apply(p.domain_units), p.domain.label or "matrix-units")


def kraus_from_choi(c: ChoiMatrix, tol: ToleranceConfig = DEFAULT_TOL) -> list[np.ndarray]:
    """Kraus operators ``K`` (convention ``X -> sum K^* X K``) from a PSD Choi matrix."""
    w, v = c.eigh
    if w[0] < -tol.eig_tol:
        raise ValueError(f"Choi matrix is not PSD (min eigenvalue {w[0]:.3g})")
    out = []
    for lam, vec in zip(w, v.T):
        if lam > tol.eig_tol:
            u = np.sqrt(lam) * vec.conj()
            out.append(u.reshape(c.output_dim, c.input_dim).T)
    return out


@dataclass
class CpReport:
    passed: bool
    min_eigenvalue: float
    mode: str
    witness: Any = None

    def __bool__(self):
        return self.passed

    def to_check(self, name: str = "completely_positive") -> Check:
        return Check(name, self.passed, max(0.0, -self.min_eigenvalue), self.witness, detail=self.mode)


def is_completely_positive(
    p: CpMap,
    tol: ToleranceConfig = DEFAULT_TOL,
    restrict_to: SpanBasis | None = None,
    *,
    mode: str | None = None,
    n_max: int = 4,
    samples: int = 100,
    seed: int = 0,
) -> CpReport:
    """Complete positivity via the Choi matrix, or by sampling block positivity.

    The sampled mode draws families ``a_1..a_m`` (``m <= n_max``) from the
    domain and tests ``sum_jk b_j^* P(a_j^* a_k) b_k >= 0``. Without
    ``restrict_to`` the quantifier over ``b`` is decided exactly by the
    smallest eigenvalue of the block matrix ``[P(a_j^* a_k)]``; with it, the
    ``b_j`` are sampled from that span.
    """
    if mode is None:
        mode = "choi" if restrict_to is None and p.domain_units is not None else "sampled"
    if mode == "choi":
        c = choi(p)
        lam = c.min_eigenvalue
        scale = max(1.0, float(np.max(np.abs(c.eigenvalues))))
        ok = lam >= -tol.eig_tol * scale
        report = CpReport(ok, lam, "choi", None if ok else c.min_eigenvector)
    elif mode == "sampled":
        report = _sampled_cp(p, tol, restrict_to, n_max, samples, seed)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    p.verified_cp = report.passed
    return report


def _random_in_span(rng, basis: SpanBasis, rank_one: bool = False) -> np.ndarray:
    if rank_one and len(basis) == basis.ambient_dim**2:
        d = basis.ambient_dim
        x = random_matrix(rng, d, 1)
        y = random_matrix(rng, d, 1)
        return x @ dagger(y)
    c = random_matrix(rng, 1, len(basis))[0]
    return basis.synthesize(c)


def _sampled_cp(p, tol, restrict_to, n_max, samples, seed) -> CpReport:
    rng = np.random.default_rng(seed)
    dc = p.codomain.ambient_dim
    worst, witness = np.inf, None
    for t in range(samples):
        m = 1 + t % n_max
        a = np.array([_random_in_span(rng, p.domain, rank_one=t % 2 == 0) for _ in range(m)])
        prods = np.einsum("jba,kbc->jkac", a.conj(), a)
        blocks = p.apply(prods.reshape(-1, *prods.shape[2:]), check=False).reshape(m, m, dc, dc)
        big = np.einsum("jkab->jakb", blocks).reshape(m * dc, m * dc)
        big = (big + dagger(big)) / 2
        if restrict_to is None:
            lam = float(sla.eigvalsh(big)[0])
            bs = None
        else:
            bs = np.array([_random_in_span(rng, restrict_to) for _ in range(m)])
            stack = bs.reshape(m * dc, dc)
            s = dagger(stack) @ big @ stack
            lam = float(sla.eigvalsh((s + dagger(s)) / 2)[0])
        scale = max(1.0, max_abs(big))
        if lam / scale < worst:
            worst = lam / scale
            witness = {"m": m, "a": a, "b": bs, "min_eigenvalue": lam}
    ok = worst >= -tol.eig_tol
    return CpReport(ok, float(worst), "sampled", None if ok else witness)


# ---- block matrices and Schur products ------------------------------------------------


@dataclass
class BlockMatrix:
    """An ``m x m`` grid of ``D x D`` blocks, stored as an array of shape ``(m, m, D, D)``."""

    blocks: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.blocks, dtype=complex)
        if b.ndim != 4 or b.shape[0] != b.shape[1] or b.shape[2] != b.shape[3]:
            raise ValueError(f"blocks must have shape (m, m, D, D), got {b.shape}")
        self.blocks = b

    @property
    def m(self) -> int:
        return self.blocks.shape[0]

    @property
    def block_dim(self) -> int:
        return self.blocks.shape[2]

    def assemble(self) -> np.ndarray:
        m, d = self.m, self.block_dim
        return np.einsum("ijab->iajb", self.blocks).reshape(m * d, m * d)

    @classmethod
    def from_assembled(cls, mat, m: int) -> "BlockMatrix":
        mat = np.asarray(mat, dtype=complex)
        d = mat.shape[0] // m
        return cls(np.einsum("iajb->ijab", mat.reshape(m, d, m, d)))

    @classmethod
    def gram(cls, rows) -> "BlockMatrix":
        """``[x_i^* x_j]`` summed over the leading axis of ``rows`` (shape ``(r, m, D, D)``); always PSD."""
        rows = np.asarray(rows, dtype=complex)
        return cls(np.einsum("rjba,rkbc->jkac", rows.conj(), rows))

    def min_eigenvalue(self) -> float:
        a = self.assemble()
        return float(sla.eigvalsh((a + dagger(a)) / 2)[0])


def _check_pair(a: BlockMatrix, b: BlockMatrix):
    if a.m != b.m:
        raise ValueError(f"block counts differ: {a.m} vs {b.m}")


def schur(a: BlockMatrix, b: BlockMatrix) -> BlockMatrix:
    _check_pair(a, b)
    if a.block_dim != b.block_dim:
        raise ValueError("blocks live in different ambient algebras")
    return BlockMatrix(np.einsum("ijab,ijbc->ijac", a.blocks, b.blocks))


def schur_tensor(a: BlockMatrix, b: BlockMatrix) -> BlockMatrix:
    _check_pair(a, b)
    m, d, e = a.m, a.block_dim, b.block_dim
    return BlockMatrix(np.einsum("ijab,ijcd->ijacbd", a.blocks, b.blocks).reshape(m, m, d * e, d * e))


# ---- conditional expectations -------------------------------------------------------


def verify_umegaki(e0: CpMap, tol: ToleranceConfig = DEFAULT_TOL, samples: int = 100, seed: int = 0) -> CheckSuite:
    """Axioms of a conditional expectation onto ``codomain``, with worst residuals."""
    rng = np.random.default_rng(seed)
    rng_basis = e0.codomain
    dom = e0.domain
    suite = CheckSuite()
    scale = _scale(e0.images)

    xs = [_random_in_span(rng, dom) for _ in range(samples)] + list(dom.elements)
    worst = np.inf
    worst5 = np.inf
    for x in xs:
        xx = dagger(x) @ x
        y = e0.apply(xx, check=False)
        worst = min(worst, float(sla.eigvalsh((y + dagger(y)) / 2)[0]) / _scale(xx))
        ea = e0.apply(x, check=False)
        gap = e0.apply(x @ dagger(x), check=False) - ea @ dagger(ea)
        worst5 = min(worst5, float(sla.eigvalsh((gap + dagger(gap)) / 2)[0]) / _scale(x) ** 2)
    suite.add(Check("CE1_positive", worst >= -tol.eig_tol, max(0.0, -worst)))

    res2, wit2 = 0.0, None
    for i, b1 in enumerate(rng_basis.elements):
        for j, b2 in enumerate(rng_basis.elements):
            sandwiched = np.einsum("ab,kbc,cd->kad", b1, dom.elements, b2)
            lhs = e0.apply(sandwiched, check=False)
            rhs = np.einsum("ab,kbc,cd->kad", b1, e0.images, b2)
            r = max_abs(lhs - rhs)
            if r > res2:
                res2, wit2 = r, (i, j)
    suite.add(Check("CE2_module", res2 <= tol.eq_tol * scale, res2, wit2))

    res3 = e0.star_residual()
    suite.add(Check("CE3_star_map", res3 <= tol.eq_tol * scale, res3))
    res4 = e0.identity_residual()
    suite.add(Check("CE4_unital", res4 <= tol.eq_tol, res4))
    suite.add(Check("CE5_schwarz", worst5 >= -tol.eig_tol, max(0.0, -worst5)))
    res6 = max_abs(e0.apply(rng_basis.elements, check=False) - rng_basis.elements) if len(rng_basis) else 0.0
    suite.add(Check("idempotent_on_range", res6 <= tol.eq_tol * scale, res6))
    return suite


def _left_module_span(p: CpMap, tol: ToleranceConfig, side: str) -> SpanBasis:
    dom = p.domain
    k, d = len(dom), dom.ambient_dim
    e = dom.elements
    if side == "left":
        prods = np.einsum("iab,jbc->ijac", e, e)  # c_i a_j
        rhs = np.einsum("iab,jbc->ijac", e, p.images)
    else:
        prods = np.einsum("jab,ibc->ijac", e, e)  # a_j c_i
        rhs = np.einsum("jab,ibc->ijac", p.images, e)
    lhs = p.apply(prods.reshape(k * k, d, d), check=False).reshape(k, k, -1)
    cols = (lhs - rhs.reshape(k, k, -1)).reshape(k, -1).T
    ns = null_space(cols, tol.rank_tol)
    elems = ns.T @ dom.vectors
    return orthonormal_span(elems, d, tol, label=f"module-{side}")


def _star_closed(span: SpanBasis, tol: ToleranceConfig) -> SpanBasis:
    return intersect_spans(span, span.adjoint(), tol)


@dataclass
class CeAlgebra:
    basis: SpanBasis
    right: SpanBasis
    checks: CheckSuite


def ce_algebra_report(p: CpMap, tol: ToleranceConfig = DEFAULT_TOL) -> CeAlgebra:
    """Largest *-closed span on which ``P`` is a two-sided module map, with its consistency checks."""
    left = _star_closed(_left_module_span(p, tol, "left"), tol)
    right = _star_closed(_left_module_span(p, tol, "right"), tol)
    suite = CheckSuite()
    same, res = spans_equal(left, right, tol)
    suite.add(Check("left_equals_right", same, res))
    adj = span_residual(left.adjoint(), left)
    suite.add(Check("adjoint_closed", adj <= tol.eq_tol * 10, adj))
    if len(left):
        prods = np.einsum("iab,jbc->ijac", left.elements, left.elements).reshape(-1, left.ambient_dim, left.ambient_dim)
        mres = max_abs(prods - left.synthesize(left.coefficients(prods)))
    else:
        mres = 0.0
    suite.add(Check("product_closed", mres <= tol.eq_tol * 10, mres))
    if p.identity_preserving and len(left):
        fres = max_abs(p.apply(left.elements, check=False) - left.elements)
        suite.add(Check("in_fixed_points", fres <= tol.eq_tol * 10, fres))
    return CeAlgebra(left, right, suite)


def ce_algebra(p: CpMap, tol: ToleranceConfig = DEFAULT_TOL) -> SpanBasis:
    if p.domain.ambient_dim != p.codomain.ambient_dim:
        raise PreconditionError("the module algebra needs domain and codomain in the same ambient algebra")
    rep = ce_algebra_report(p, tol)
    if not rep.checks.passed:
        names = ", ".join(c.name for c in rep.checks.failures)
        raise InvariantViolation(f"module algebra consistency failed: {names}")
    return rep.basis


def normalize_amplitude(e0: CpMap, k, tol: ToleranceConfig = DEFAULT_TOL) -> np.ndarray:
    """Rescale ``K`` to ``K E0(K^* K)^{-1/2}`` so that the amplitude map is unital."""
    k = np.asarray(k, dtype=complex)
    y = e0.apply(dagger(k) @ k)
    return k @ psd_inv_sqrt(y, tol)


def amplitude_qce(e0: CpMap, k, c_basis: SpanBasis, tol: ToleranceConfig = DEFAULT_TOL) -> CpMap:
    """The map ``X -> E0(K^* X K)``; ``K`` must be E0-normalised and commute with ``c_basis``."""
    k = np.asarray(k, dtype=complex)
    umegaki = verify_umegaki(e0, tol)
    if not umegaki.passed:
        raise PreconditionError(f"E0 is not a conditional expectation: {[c.name for c in umegaki.failures]}")
    norm = max_abs(e0.apply(dagger(k) @ k) - np.eye(e0.codomain.ambient_dim))
    if norm > tol.eq_tol:
        raise NormalizationError(f"E0(K^* K) differs from 1 by {norm:.3g}")
    comm = max((max_abs(k @ c - c @ k) for c in c_basis.elements), default=0.0)
    if comm > tol.eq_tol * _scale(k):
        raise CommutantError(f"K does not commute with the module algebra (residual {comm:.3g})")
    sandwiched = np.einsum("ba,kbc,cd->kad", k.conj(), e0.domain.elements, k)
    images = e0.apply(sandwiched, check=False)
    out = CpMap(e0.domain, e0.codomain, images, domain_units=e0.domain_units, label=f"amp({e0.label})", tol=tol)
    cp = is_completely_positive(out, tol)
    if not cp:
        raise InvariantViolation(f"amplitude map is not CP (min eigenvalue {cp.min_eigenvalue:.3g})")
    mres = 0.0
    for c in c_basis.elements:
        lhs = out.apply(np.einsum("ab,kbc->kac", c, e0.domain.elements), check=False)
        mres = max(mres, max_abs(lhs - np.einsum("ab,kbc->kac", c, out.images)))
    if mres > tol.eq_tol * _scale(out.images):
        raise InvariantViolation(f"amplitude map breaks the module property (residual {mres:.3g})")
    return out
