"""Backward Markov chains on a finite horizon: boundaries, correlations, finite-volume states."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .checks import Check, CheckSuite, max_abs
from .errors import (
    DegenerateInitialStateError,
    HorizonError,
    MarkovPropertyError,
    NotInSpanError,
    NotPSDError,
    PreconditionError,
    StateDefectError,
)
from .kernel import ExtendedQce, TransitionExpectation, verify_markov_property
from .lattice import LocalStructure, parity_split
from .linalg import ToleranceConfig, as_square, dagger, is_psd, min_eigenvalue, null_space, psd_sqrt, vec


class Provenance(str, Enum):
    TRIVIAL_IDENTITY = "TrivialIdentity"
    MARTINGALE_SOLVE = "MartingaleSolve"
    USER_SUPPLIED = "UserSupplied"


class Verdict(str, Enum):
    MARKOV_STATE = "MarkovState"
    MARKOV_CHAIN = "MarkovChain"
    INDETERMINATE = "Indeterminate"


@dataclass
class BoundarySequence:
    """Positive site elements ``b_0, ..., b_{H-1}`` in site-local coordinates."""

    elements: list
    provenance: Provenance = Provenance.USER_SUPPLIED
    factors: list | None = None

    def __post_init__(self):
        self.elements = [as_square(b, "boundary") for b in self.elements]
        if self.factors is not None:
            self.factors = [as_square(c, "boundary factor") for c in self.factors]
            if len(self.factors) != len(self.elements):
                raise ValueError("one boundary factor per boundary element is required")

    def __len__(self):
        return len(self.elements)

    def __getitem__(self, n: int) -> np.ndarray:
        if not 0 <= n < len(self.elements):
            raise HorizonError(f"no boundary element b_{n} (have b_0..b_{len(self.elements) - 1})")
        return self.elements[n]

    @classmethod
    def constant(cls, b, horizon: int, provenance=Provenance.USER_SUPPLIED, factor=None):
        return cls([b] * horizon, provenance, None if factor is None else [factor] * horizon)

    def checks(self, structure: LocalStructure, kernels: Sequence[TransitionExpectation], tol: ToleranceConfig) -> CheckSuite:
        """Positivity, admissibility, factorisation and martingale residuals (worst over sites)."""
        suite = CheckSuite()
        lam = min(min_eigenvalue(b, tol) for b in self.elements)
        suite.add(Check("boundary_psd", lam >= -tol.eig_tol, max(0.0, -lam)))
        res, worst = 0.0, None
        for n, b in enumerate(self.elements):
            adm = structure.admissible_local_basis(n)
            r = adm.residual(b)
            if r > res:
                res, worst = r, n
        suite.add(Check("boundary_admissible", res <= tol.eq_tol * 10, res, worst))
        if self.factors is not None:
            fres = max(max_abs(dagger(c) @ c - b) for c, b in zip(self.factors, self.elements))
            suite.add(Check("boundary_factor", fres <= tol.eq_tol * 10 * _scale(self.elements), fres))
            cres, cworst = 0.0, None
            for n, c in enumerate(self.factors):
                r = structure.admissible_local_basis(n).residual(c)
                if r > cres:
                    cres, cworst = r, n
            suite.add(Check("boundary_factor_admissible", cres <= tol.eq_tol * 10, cres, cworst))
        mres = martingale_residuals(self, kernels, structure)
        i = int(np.argmax(mres)) if len(mres) else 0
        m = float(mres[i]) if len(mres) else 0.0
        suite.add(Check("martingale", m <= tol.eq_tol * 10 * _scale(self.elements), m, None if m <= tol.eq_tol * 10 else i))
        return suite


def _scale(xs) -> float:
    return max(1.0, max(max_abs(x) for x in xs)) if len(xs) else 1.0


def martingale_residuals(boundary: BoundarySequence, kernels, structure: LocalStructure) -> np.ndarray:
    """``|E_n(1 b_{n+1}) - b_n|`` for every bond."""
    out = []
    for n, e in enumerate(kernels):
        if n + 1 >= len(boundary):
            break
        lhs = e.apply(structure.local_product(n, np.eye(e.r), boundary[n + 1]))
        out.append(max_abs(lhs - boundary[n]))
    return np.array(out)


def normalize_initial(rho, b0, tol: ToleranceConfig | None = None) -> np.ndarray:
    """Rescale so that the functional ``x -> tr(rho x)`` takes the value 1 on ``b0``."""
    tol = tol or ToleranceConfig()
    rho = as_square(rho, "initial state")
    val = complex(np.trace(rho @ as_square(b0, "b0")))
    if abs(val) <= tol.eq_tol:
        raise DegenerateInitialStateError(f"initial state vanishes on b_0 (value {val:.3g}); cannot normalise")
    return rho / val


class ChainSpec:
    """Initial state, one kernel per bond and a boundary sequence on a finite horizon."""

    def __init__(
        self,
        structure: LocalStructure,
        kernels: Sequence[TransitionExpectation] | TransitionExpectation,
        initial_state,
        boundaries: BoundarySequence | None = None,
        *,
        tol: ToleranceConfig | None = None,
        validate: bool = True,
    ):
        self.structure = structure
        self.tol = tol or structure.tol
        self.horizon = structure.horizon
        n_bonds = self.horizon - 1
        if isinstance(kernels, TransitionExpectation):
            kernels = [kernels.at_site(s, structure, check_markov=False) if s != kernels.site else kernels for s in range(n_bonds)]
            self.homogeneous = True
        else:
            kernels = list(kernels)
            self.homogeneous = False
        if len(kernels) != n_bonds:
            raise ValueError(f"expected {n_bonds} kernels for horizon {self.horizon}, got {len(kernels)}")
        for s, e in enumerate(kernels):
            if e.site != s or e.structure.block_dims[: s + 2] != structure.block_dims[: s + 2]:
                raise ValueError(f"kernel {s} is not a kernel on bond [{s}, {s + 1}] of this structure")
        self.kernels = kernels
        if validate:
            for e in kernels:
                chk = verify_markov_property(e, structure, self.tol)
                if not chk:
                    raise MarkovPropertyError(f"kernel on bond {e.site} violates the Markov property (residual {chk.residual:.3g})")
        rho = as_square(initial_state, "initial state")
        r0 = structure.block_dims[0]
        if rho.shape != (r0, r0):
            raise ValueError(f"initial state must be {r0}x{r0}, got {rho.shape}")
        if validate and not is_psd(rho, self.tol):
            raise NotPSDError("initial state is not positive semidefinite", min_eigenvalue=min_eigenvalue(rho, self.tol))
        tr = np.trace(rho).real
        if tr <= self.tol.eq_tol:
            raise DegenerateInitialStateError("initial state has zero trace")
        self.initial_state = rho / tr
        self.boundaries = boundaries if boundaries is not None else trivial_boundary(self)
        if len(self.boundaries) != self.horizon:
            raise ValueError(f"expected {self.horizon} boundary elements, got {len(self.boundaries)}")
        self.phi0 = normalize_initial(self.initial_state, self.boundaries[0], self.tol)

    def __repr__(self):
        return f"ChainSpec({self.structure!r}, horizon={self.horizon}, boundaries={self.boundaries.provenance.value})"

    @classmethod
    def homogeneous_chain(cls, structure, kernel, initial_state, boundaries=None, **kw) -> "ChainSpec":
        return cls(structure, kernel, initial_state, boundaries, **kw)

    def with_boundaries(self, boundaries: BoundarySequence) -> "ChainSpec":
        return ChainSpec(self.structure, self.kernels, self.initial_state, boundaries, tol=self.tol, validate=False)

    def kernel(self, s: int) -> TransitionExpectation:
        if not 0 <= s < len(self.kernels):
            raise HorizonError(f"no kernel on bond [{s}, {s + 1}] within horizon {self.horizon}")
        return self.kernels[s]

    def extension(self, s: int) -> ExtendedQce:
        return ExtendedQce(self.kernel(s))

    def checks(self) -> CheckSuite:
        suite = CheckSuite()
        res = max(verify_markov_property(e, self.structure, self.tol).residual for e in self.kernels)
        suite.add(Check("markov_property", res <= self.tol.eq_tol * 10, res))
        val = abs(np.trace(self.phi0 @ self.boundaries[0]) - 1)
        suite.add(Check("initial_normalized", val <= self.tol.eq_tol, val))
        suite.extend(self.boundaries.checks(self.structure, self.kernels, self.tol))
        return suite


# ---- boundaries ----------------------------------------------------------------------


def trivial_boundary(spec: ChainSpec) -> BoundarySequence:
    """``b_n = E_n(1)`` on every bond; the last site gets the identity."""
    s = spec.structure
    elems = [e.apply(np.eye(e.dim)) for e in spec.kernels]
    elems.append(np.eye(s.block_dims[-1], dtype=complex))
    return BoundarySequence(elems, Provenance.TRIVIAL_IDENTITY)


def boundary_transfer(kernel: TransitionExpectation) -> np.ndarray:
    """Matrix of ``b -> E(1 b)`` on row-major site coefficients."""
    s = kernel.structure
    return kernel.matrix @ s.local_product_matrix(kernel.site, np.eye(kernel.r))


def unit_radius_kraus_kernel(structure: LocalStructure, n: int, kraus) -> TransitionExpectation:
    """``x -> K^* x K / rho`` with ``rho`` the spectral radius of its boundary transfer map."""
    e = TransitionExpectation.from_kraus(structure, n, kraus, label="kraus")
    rho = float(np.max(np.abs(np.linalg.eigvals(boundary_transfer(e)))))
    return TransitionExpectation.from_kraus(structure, n, kraus, scale=1.0 / rho, label="kraus/radius")


@dataclass
class BoundaryReport:
    found: bool
    leading_eigenvalue: complex
    boundary: BoundarySequence | None = None
    leading_eigenvector: np.ndarray | None = None
    eigenvalues: np.ndarray | None = None
    checks: CheckSuite = field(default_factory=CheckSuite)
    detail: str = ""

    def __bool__(self):
        return self.found


def solve_boundary_homogeneous(spec: ChainSpec, tol: ToleranceConfig | None = None) -> BoundaryReport:
    """Constant boundary ``b`` with ``E(1 b) = b``, from the eigenvalue-1 spectral projection.

    The candidate is the projection of the identity onto the fixed space
    (the Cesaro limit of ``T^k(1)``), falling back to hermitised fixed
    vectors; it must be PSD with an admissible square root.
    """
    tol = tol or spec.tol
    dims = set(spec.structure.block_dims)
    if len(dims) != 1:
        raise PreconditionError("homogeneous boundary solve needs identical site algebras")
    mats = [e.matrix for e in spec.kernels]
    if any(max_abs(m - mats[0]) > tol.eq_tol for m in mats[1:]):
        raise PreconditionError("homogeneous boundary solve needs the same kernel on every bond")
    e = spec.kernels[1] if len(spec.kernels) > 1 else spec.kernels[0]
    r = e.r
    t = boundary_transfer(e)
    evals, evecs = np.linalg.eig(t)
    order = np.argsort(-np.abs(evals), kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    lead = complex(evals[0])
    lead_vec = evecs[:, 0].reshape(r, r)
    report = dict(leading_eigenvalue=lead, leading_eigenvector=lead_vec, eigenvalues=evals)
    shifted = t - np.eye(r * r)
    right = null_space(shifted, max(tol.rank_tol, tol.eig_tol))
    if right.shape[1] == 0:
        return BoundaryReport(False, detail=f"no eigenvalue within {tol.eig_tol:g} of 1 (leading {lead:.6g})", **report)
    left = null_space(dagger(shifted), max(tol.rank_tol, tol.eig_tol))
    candidates = []
    if left.shape[1] == right.shape[1]:
        proj = right @ np.linalg.solve(dagger(left) @ right, dagger(left))
        candidates.append((proj @ vec(np.eye(r))).reshape(r, r))
    candidates += [right[:, j].reshape(r, r) for j in range(right.shape[1])]
    for i, b in enumerate(candidates):
        b = (b + dagger(b)) / 2
        if max_abs(b) <= tol.eq_tol:
            continue
        if i > 0 or len(candidates) == right.shape[1]:
            # raw fixed vectors carry an arbitrary scale; fix tr b = r (so b = 1 when 1 is fixed)
            tr = np.trace(b).real
            if abs(tr) > tol.eq_tol:
                b = b * (r / tr)
            elif min_eigenvalue(b, tol) < 0:
                b = -b
        if not is_psd(b, tol):
            continue
        c = psd_sqrt(b, tol)
        boundary = BoundarySequence.constant(b, spec.horizon, Provenance.MARTINGALE_SOLVE, c)
        checks = boundary.checks(spec.structure, spec.kernels, tol)
        if checks.passed:
            return BoundaryReport(True, boundary=boundary, checks=checks, **report)
    return BoundaryReport(False, detail="eigenvalue 1 present but no PSD admissible fixed point", **report)


# ---- correlations --------------------------------------------------------------------


@dataclass
class CorrelationQuery:
    """Observables ``a_0, ..., a_n`` (site-local coordinates) and a horizon extension ``k``."""

    observables: list
    k: int = 0

    def __post_init__(self):
        self.observables = [as_square(a, "observable") for a in self.observables]
        if not self.observables:
            raise ValueError("a query needs at least one observable")
        if self.k < 0:
            raise ValueError("horizon extension must be nonnegative")

    @property
    def n(self) -> int:
        return len(self.observables) - 1

    def validate(self, structure: LocalStructure, tol: ToleranceConfig | None = None):
        tol = tol or structure.tol
        for i, a in enumerate(self.observables):
            if i >= structure.horizon:
                raise HorizonError(f"observable on site {i} beyond horizon {structure.horizon}")
            r = structure.block_dims[i]
            if a.shape != (r, r):
                raise NotInSpanError(f"observable {i} has shape {a.shape}, site algebra is M_{r}", residual=np.inf)

    @classmethod
    def from_ambient(cls, structure: LocalStructure, observables, k: int = 0) -> "CorrelationQuery":
        """Convert ambient-coordinate site observables, rejecting anything outside its site algebra."""
        local = []
        for i, a in enumerate(observables):
            units = structure.range_units(i, i)
            res = units.residual(a)
            if res > structure.tol.eq_tol * max(1.0, max_abs(a)):
                raise NotInSpanError(f"observable {i} is not in the site-{i} algebra (residual {res:.3g})", residual=res)
            local.append(units.extract(a))
        return cls(local, k)

    def with_k(self, k: int) -> "CorrelationQuery":
        return CorrelationQuery(self.observables, k)


def _tail(spec: ChainSpec, start: int, steps: int) -> np.ndarray:
    """``E_start(1 E_{start+1}(1 ... E_{start+steps-1}(1 b_{start+steps})))``, an element of site ``start``."""
    s = spec.structure
    x = spec.boundaries[start + steps]
    for site in range(start + steps - 1, start - 1, -1):
        e = spec.kernel(site)
        x = e.apply(s.local_product(site, np.eye(e.r), x))
    return x


def evaluate(spec: ChainSpec, q: CorrelationQuery) -> complex:
    """Nested value ``phi0(E_0(a_0 E_1(a_1 ... E_{n+k}(1 b_{n+k+1}))))``."""
    q.validate(spec.structure, spec.tol)
    n, k = q.n, q.k
    last = n + k + 1
    if last >= spec.horizon:
        raise HorizonError(f"query needs b_{last} but the horizon has sites 0..{spec.horizon - 1}")
    s = spec.structure
    x = _tail(spec, n + 1, k)
    for site in range(n, -1, -1):
        x = spec.kernel(site).apply(s.local_product(site, q.observables[site], x))
    return complex(np.trace(spec.phi0 @ x))


def value_profile(spec: ChainSpec, q: CorrelationQuery, k_max: int) -> np.ndarray:
    return np.array([evaluate(spec, q.with_k(k)) for k in range(k_max + 1)])


@dataclass
class StabilizationReport:
    values: np.ndarray
    differences: np.ndarray
    passed: bool
    max_difference: float
    ratios: np.ndarray

    def __bool__(self):
        return self.passed

    def to_check(self, name: str = "stabilization") -> Check:
        return Check(name, self.passed, self.max_difference)


def stabilization_check(spec: ChainSpec, q: CorrelationQuery, k_max: int, tol: float | None = None) -> StabilizationReport:
    """Successive differences of the horizon-extended values; passes if those from ``k = 1`` on vanish."""
    tol = spec.tol.eq_tol if tol is None else tol
    vals = value_profile(spec, q, k_max)
    diffs = np.diff(vals)
    tail = np.abs(diffs[1:])
    worst = float(tail.max()) if tail.size else 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.abs(diffs[1:]) / np.abs(diffs[:-1]) if diffs.size > 1 else np.zeros(0)
    return StabilizationReport(vals, diffs, worst < tol, worst, ratios)


# ---- all-basis values ----------------------------------------------------------------


def _site_products(spec: ChainSpec, s: int) -> np.ndarray:
    """``(r_s^2, m, r_{s+1}^2)``: matrices of ``x -> E_s(a x)`` for every site basis element ``a``."""
    st = spec.structure
    e = spec.kernel(s)
    basis = st.local_site_basis(s).elements
    return np.stack([e.matrix @ st.local_product_matrix(s, a) for a in basis], axis=1)


def forward_vectors(spec: ChainSpec, n: int) -> np.ndarray:
    """Rows ``F[p]`` with ``F[p] . vec(u) = phi0(E_0(p_0 ... E_{n-1}(p_{n-1} u)))`` for ``u`` on site ``n``.

    Rows run over the ordered-product basis of ``[0, n-1]`` (a single row for ``n = 0``).
    """
    f = vec(spec.phi0.T)[None, :]
    for s in range(n):
        g = _site_products(spec, s)
        f = np.einsum("pi,iaj->paj", f, g).reshape(-1, g.shape[-1])
    return f


def product_values(spec: ChainSpec, n: int, k: int = 0) -> np.ndarray:
    """Values of all ordered products over ``[0, n]`` (earlier sites slowest), at horizon extension ``k``."""
    if n + k + 1 >= spec.horizon:
        raise HorizonError(f"values on [0, {n}] at extension {k} need b_{n + k + 1}; horizon is {spec.horizon}")
    return forward_vectors(spec, n + 1) @ vec(_tail(spec, n + 1, k))


def product_labels(spec: ChainSpec, n: int) -> list:
    labels = [spec.structure.local_site_labels(s) for s in range(n + 1)]
    return [tuple(labels[s][i] for s, i in enumerate(t)) for t in np.ndindex(*(len(x) for x in labels))]


# ---- finite-volume states ------------------------------------------------------------


@dataclass
class FiniteVolumeState:
    n: int
    rho: np.ndarray
    source: ChainSpec
    checks: CheckSuite

    @property
    def range(self) -> tuple[int, int]:
        return (0, self.n)

    def expectation(self, x) -> complex:
        return complex(np.trace(self.rho @ x))


def density_matrix(spec: ChainSpec, n: int, *, strict: bool = True, reconstruct: bool = True) -> FiniteVolumeState:
    """Density matrix of the restriction to ``[0, n]`` in prefix coordinates.

    The functional is obtained by pulling the initial functional back through
    the extended kernels; ``reconstruct`` compares it with the nested
    evaluation on every ordered product. With ``strict`` a state that is not
    PSD within ``eig_tol`` raises.
    """
    if n + 1 >= spec.horizon:
        raise HorizonError(f"density matrix on [0, {n}] needs b_{n + 1}; horizon is {spec.horizon}")
    s, tol = spec.structure, spec.tol
    sigma = spec.phi0
    for site in range(n + 1):
        sigma = spec.extension(site).dual(sigma)
    # close off with b_{n+1}: the product x b in prefix coordinates is x (x) b+ + x v (x) b-
    b = spec.boundaries[n + 1]
    bp, bm = parity_split(b, s.site_parity(n + 1))
    dim, r = s.range_dim(0, n), s.block_dims[n + 1]
    v = np.diag(s.range_parity(0, n)).astype(complex)
    t = sigma.reshape(dim, r, dim, r)
    rho = np.einsum("ij,ajbi->ab", bp, t) + v @ np.einsum("ij,ajbi->ab", bm, t)

    checks = CheckSuite()
    tr = complex(np.trace(rho))
    checks.add(Check("trace", abs(tr - 1) <= tol.eq_tol * 10, abs(tr - 1)))
    herm = max_abs(rho - dagger(rho))
    rho_h = (rho + dagger(rho)) / 2
    lam = float(np.linalg.eigvalsh(rho_h)[0])
    checks.add(Check("hermitian", herm <= tol.eq_tol * 10, herm))
    checks.add(Check("psd", lam >= -tol.eig_tol, max(0.0, -lam)))
    if reconstruct:
        elems = s.local_product_elements(0, n)[0]
        direct = np.einsum("ij,kji->k", rho, elems)
        nested = product_values(spec, n)
        diff = np.abs(direct - nested)
        i = int(np.argmax(diff))
        res = float(diff[i])
        checks.add(Check("reconstruction", res <= 1e-10, res, None if res <= 1e-10 else product_labels(spec, n)[i]))
    if strict and lam < -tol.eig_tol:
        raise StateDefectError(
            f"finite-volume state on [0, {n}] is not positive (min eigenvalue {lam:.3g}); kernel or boundary is defective",
            min_eigenvalue=lam,
            trace=tr,
        )
    return FiniteVolumeState(n, rho, spec, checks)


# ---- projectivity, compatibility, classification -------------------------------------


def check_projectivity(spec: ChainSpec, n: int, tol: float | None = None) -> Check:
    """Restriction of the ``[0, n+1]`` state to ``[0, n]`` against the ``[0, n]`` state, over the product basis."""
    tol = spec.tol.eq_tol * 10 if tol is None else tol
    v0 = product_values(spec, n, 0)
    v1 = product_values(spec, n, 1)
    diff = np.abs(v1 - v0)
    i = int(np.argmax(diff))
    res = float(diff[i])
    ok = res <= tol * max(1.0, float(np.max(np.abs(v0))))
    return Check(f"projectivity[{n}]", ok, res, None if ok else product_labels(spec, n)[i])


def check_compatibility(spec: ChainSpec, n: int, tol: float | None = None) -> Check:
    """``phi(p E(a b)) = phi(p E(a E'(b)))`` over products ``p`` on ``[0, n-1]``, ``a`` on ``n``, ``b`` on ``n+1``.

    Here ``E`` is the bond kernel at ``n`` with the right-hand factor
    ``b_{n+1}`` attached when the resulting site element is fed into the
    finite-volume state, and ``E'(b) = E_{n+1}(b 1)``.
    """
    tol = spec.tol.eq_tol * 10 if tol is None else tol
    if n + 2 >= spec.horizon:
        raise HorizonError(f"compatibility at {n} needs the kernel on bond [{n + 1}, {n + 2}]; horizon is {spec.horizon}")
    s = spec.structure
    e, e1 = spec.kernel(n), spec.kernel(n + 1)
    basis_n = s.local_site_basis(n).elements
    basis_n1 = s.local_site_basis(n + 1).elements
    one_n1 = np.eye(e1.r_next)
    pushed = np.array([e1.apply(s.local_product(n + 1, y, one_n1)) for y in basis_n1])
    b_next = spec.boundaries[n + 1]

    def closed(u):
        return e.apply(s.local_product(n, u, b_next))

    lhs, rhs = [], []
    for a in basis_n:
        for y, py in zip(basis_n1, pushed):
            lhs.append(vec(closed(e.apply(s.local_product(n, a, y)))))
            rhs.append(vec(closed(e.apply(s.local_product(n, a, py)))))
    fwd = forward_vectors(spec, n)
    lhs_v, rhs_v = fwd @ np.array(lhs).T, fwd @ np.array(rhs).T
    diff = np.abs(lhs_v - rhs_v)
    p, j = np.unravel_index(int(np.argmax(diff)), diff.shape)
    res = float(diff[p, j])
    scale = max(1.0, float(np.max(np.abs(lhs_v))))
    ok = res <= tol * scale
    witness = None
    if not ok:
        ia, iy = divmod(int(j), len(basis_n1))
        past = product_labels(spec, n - 1)[p] if n >= 1 else ()
        witness = {
            "past": list(past),
            "a_n": s.local_site_labels(n)[ia],
            "a_n+1": s.local_site_labels(n + 1)[iy],
            "lhs": complex(lhs_v[p, j]),
            "rhs": complex(rhs_v[p, j]),
        }
    return Check(f"compatibility[{n}]", ok, res, witness)


@dataclass
class ClassificationReport:
    verdict: Verdict
    checks: CheckSuite
    n_max: int
    failing: str | None = None
    witness: object = None


def _stabilization_over_basis(spec: ChainSpec, n: int, tol: float) -> Check:
    """Values over the ``[0, n]`` basis must not move between extensions ``k >= 1``."""
    k_top = spec.horizon - 2 - n
    if k_top < 2:
        return Check(f"stabilization[{n}]", True, 0.0, detail="no extensions beyond k = 1 within horizon")
    vals = [product_values(spec, n, k) for k in range(1, k_top + 1)]
    diffs = [np.max(np.abs(b - a)) for a, b in zip(vals, vals[1:])]
    res = float(max(diffs))
    scale = max(1.0, float(np.max(np.abs(vals[0]))))
    ok = res <= tol * scale
    return Check(f"stabilization[{n}]", ok, res, None if ok else 1 + int(np.argmax(diffs)))


def classify(spec: ChainSpec, n_max: int | None = None, tol: float | None = None) -> ClassificationReport:
    """MarkovState, MarkovChain or Indeterminate from checks at ``n = 0..n_max`` (default ``horizon - 3``)."""
    tol = spec.tol.eq_tol * 10 if tol is None else tol
    if n_max is None:
        n_max = spec.horizon - 3
    if n_max < 0 or n_max + 2 >= spec.horizon:
        raise HorizonError(f"classification needs n_max in [0, {spec.horizon - 3}], got {n_max}")
    checks = CheckSuite()
    for n in range(n_max + 1):
        checks.add(_stabilization_over_basis(spec, n, tol))
    for n in range(n_max + 1):
        checks.add(check_projectivity(spec, n, tol))
    for n in range(n_max + 1):
        checks.add(check_compatibility(spec, n, tol))
    for prefix in ("stabilization", "projectivity"):
        bad = [c for c in checks if c.name.startswith(prefix) and not c.passed]
        if bad:
            return ClassificationReport(Verdict.INDETERMINATE, checks, n_max, bad[0].name, bad[0].witness)
    bad = [c for c in checks if c.name.startswith("compatibility") and not c.passed]
    if not bad:
        return ClassificationReport(Verdict.MARKOV_STATE, checks, n_max)
    worst = max(bad, key=lambda c: c.residual)
    return ClassificationReport(Verdict.MARKOV_CHAIN, checks, n_max, worst.name, worst.witness)
