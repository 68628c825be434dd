import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qmarkov.chain import (
    BoundarySequence,
    ChainSpec,
    CorrelationQuery,
    Provenance,
    Verdict,
    check_compatibility,
    check_projectivity,
    classify,
    density_matrix,
    evaluate,
    martingale_residuals,
    normalize_initial,
    product_values,
    solve_boundary_homogeneous,
    stabilization_check,
    trivial_boundary,
    unit_radius_kraus_kernel,
)
from qmarkov.errors import DegenerateInitialStateError, HorizonError, NotInSpanError, StateDefectError
from qmarkov.kernel import (
    TransitionExpectation,
    classical_kernel,
    product_kernel,
    random_even_kernel,
    random_tensor_kernel,
)
from qmarkov.lattice import Kind, LatticeSpec, build_lattice
from qmarkov.linalg import SpanBasis, matrix_units, random_density, random_matrix, random_psd
from qmarkov.maps import CpMap, amplitude_qce, normalize_amplitude

seeds = st.integers(0, 2**32 - 1)


def tensor_lattice(h, d=2):
    return build_lattice(LatticeSpec(Kind.TENSOR, (d,), h))


def fermi_lattice(h):
    return build_lattice(LatticeSpec(Kind.FERMI, (1,), h))


def product_chain(h, seed=0):
    s = tensor_lattice(h)
    rng = np.random.default_rng(seed)
    rho0, sigma = random_density(rng, 2), random_density(rng, 2)
    return ChainSpec(s, product_kernel(s, 0, sigma), rho0), rho0, sigma


def random_chain(h, seed=0, fermi=False):
    s = fermi_lattice(h) if fermi else tensor_lattice(h)
    rng = np.random.default_rng(seed)
    make = random_even_kernel if fermi else random_tensor_kernel
    kernels = [make(s, n, rng) for n in range(h - 1)]
    rho0 = random_density(rng, 2)
    if fermi:
        rho0 = np.diag(np.diag(rho0))  # even initial state
    return ChainSpec(s, kernels, rho0)


# ---- boundaries --------------------------------------------------------------------


def test_trivial_boundary_of_unital_kernel():
    spec = random_chain(4)
    b = trivial_boundary(spec)
    assert b.provenance is Provenance.TRIVIAL_IDENTITY
    assert all(np.allclose(x, np.eye(2)) for x in b.elements)
    assert np.max(martingale_residuals(b, spec.kernels, spec.structure)) < 1e-12


def test_trivial_boundary_of_scaled_kernel():
    s = tensor_lattice(4)
    e = random_tensor_kernel(s, 0, np.random.default_rng(0)).scaled(2.0)
    spec = ChainSpec(s, e, np.eye(2) / 2, validate=False)
    b = trivial_boundary(spec)
    assert np.allclose(b[0], 2 * np.eye(2))
    res = martingale_residuals(b, spec.kernels, s)
    # E(1 b_1) = 4 * 1 against b_0 = 2 * 1
    assert res[0] == pytest.approx(2.0)
    assert not spec.checks()["martingale"].passed


def test_trivial_boundary_of_classical_kernel():
    s = tensor_lattice(3)
    spec = ChainSpec(s, classical_kernel(s, 0, [[0.2, 0.8], [0.5, 0.5]]), np.eye(2) / 2)
    assert all(np.allclose(x, np.eye(2)) for x in spec.boundaries.elements)


def test_boundary_index_outside_horizon():
    spec = random_chain(3)
    with pytest.raises(HorizonError):
        spec.boundaries[3]
    with pytest.raises(HorizonError):
        spec.kernel(2)


def test_solve_identity_preserving():
    spec = random_chain(4)
    hom = ChainSpec(spec.structure, spec.kernels[0], spec.initial_state)
    rep = solve_boundary_homogeneous(hom)
    assert rep.found
    assert np.abs(rep.boundary[0] - np.eye(2)).max() < 1e-10
    assert rep.boundary.provenance is Provenance.MARTINGALE_SOLVE


@pytest.mark.parametrize("seed", range(5))
def test_solve_unit_radius_kraus(seed):
    s = tensor_lattice(4)
    rng = np.random.default_rng(seed)
    e = unit_radius_kraus_kernel(s, 0, [random_matrix(rng, 4, 2)])
    assert not e.identity_preserving
    spec = ChainSpec(s, e, np.eye(2) / 2)
    rep = solve_boundary_homogeneous(spec)
    assert rep.found, rep.detail
    assert abs(rep.leading_eigenvalue - 1) < 1e-10
    assert np.max(martingale_residuals(rep.boundary, spec.kernels, s)) < 1e-9
    assert np.linalg.eigvalsh(rep.boundary[0])[0] >= -1e-12


def test_solve_contractive_has_no_solution():
    s = tensor_lattice(4)
    rng = np.random.default_rng(1)
    e = unit_radius_kraus_kernel(s, 0, [random_matrix(rng, 4, 2)]).scaled(0.5)
    rep = solve_boundary_homogeneous(ChainSpec(s, e, np.eye(2) / 2, validate=False))
    assert not rep
    assert abs(rep.leading_eigenvalue) == pytest.approx(0.5)
    assert "leading" in rep.detail


# ---- initial state -------------------------------------------------------------------


def test_normalize_initial_examples():
    rho = random_density(np.random.default_rng(0), 3)
    assert np.allclose(normalize_initial(rho, np.eye(3)), rho)
    assert np.allclose(normalize_initial(rho, 2 * np.eye(3)), rho / 2)
    b0 = random_psd(np.random.default_rng(1), 3)
    b0 *= 0.37 / np.trace(rho @ b0).real
    phi0 = normalize_initial(rho, b0)
    assert abs(np.trace(phi0 @ b0) - 1) < 1e-14
    with pytest.raises(DegenerateInitialStateError):
        normalize_initial(np.diag([1.0, 0.0]), np.diag([0.0, 1.0]))


@given(seeds)
def test_initial_functional_is_normalized_on_b0(seed):
    s = tensor_lattice(3)
    rng = np.random.default_rng(seed)
    e = unit_radius_kraus_kernel(s, 0, [random_matrix(rng, 4, 2)])
    spec = ChainSpec(s, e, random_density(rng, 2))
    assert abs(np.trace(spec.phi0 @ spec.boundaries[0]) - 1) < 1e-12


# ---- evaluation ------------------------------------------------------------------------


def test_all_identity_observables_give_one():
    spec = random_chain(5, fermi=True)
    q = CorrelationQuery([np.eye(2)] * 3, k=1)
    assert abs(evaluate(spec, q) - 1) < 1e-12


def test_product_chain_factorizes():
    spec, rho0, sigma = product_chain(5)
    rng = np.random.default_rng(3)
    obs = [random_matrix(rng, 2) for _ in range(3)]
    expected = np.trace(rho0 @ obs[0]) * np.prod([np.trace(sigma @ a) for a in obs[1:]])
    assert abs(evaluate(spec, CorrelationQuery(obs)) - expected) < 1e-12


def test_classical_joint_probabilities():
    s = tensor_lattice(5, d=3)
    p = np.array([[0.1, 0.6, 0.3], [0.5, 0.25, 0.25], [0.2, 0.2, 0.6]])
    pi = np.array([0.2, 0.3, 0.5])
    spec = ChainSpec(s, classical_kernel(s, 0, p), np.diag(pi))
    for path in itertools.product(range(3), repeat=3):
        obs = [np.diag(np.eye(3)[i]) for i in path]
        expected = pi[path[0]] * p[path[0], path[1]] * p[path[1], path[2]]
        assert abs(evaluate(spec, CorrelationQuery(obs)) - expected) < 1e-14


def test_query_validation():
    spec = random_chain(3)
    with pytest.raises(HorizonError):
        evaluate(spec, CorrelationQuery([np.eye(2)] * 2, k=1))
    with pytest.raises(NotInSpanError):
        evaluate(spec, CorrelationQuery([np.eye(3)]))
    s = spec.structure
    with pytest.raises(NotInSpanError):
        CorrelationQuery.from_ambient(s, [s.range_units(1, 1).embed(np.diag([1.0, -1.0]))])
    with pytest.raises(ValueError):
        CorrelationQuery([])


def test_from_ambient_roundtrip():
    s = fermi_lattice(3)
    a = s.local_annihilator(1)
    q = CorrelationQuery.from_ambient(s, [np.eye(8), s.annihilator(1)])
    assert np.allclose(q.observables[1], a)


# ---- stabilization -------------------------------------------------------------------


def test_martingale_boundary_stabilizes():
    spec = random_chain(8, fermi=True, seed=2)
    q = CorrelationQuery([np.diag([1.0, 0.0]), np.eye(2)])
    rep = stabilization_check(spec, q, 5, 1e-10)
    assert rep.passed and rep.max_difference < 1e-10


def test_scaled_kernel_grows_by_factor_two():
    s = tensor_lattice(8)
    e = random_tensor_kernel(s, 0, np.random.default_rng(0)).scaled(2.0)
    spec = ChainSpec(s, e, np.eye(2) / 2, BoundarySequence.constant(np.eye(2), 8), validate=False)
    rep = stabilization_check(spec, CorrelationQuery([np.eye(2)]), 5)
    assert not rep
    assert np.allclose(rep.ratios, 2.0)


def test_contractive_kernel_shrinks_geometrically():
    s = tensor_lattice(8)
    e = random_tensor_kernel(s, 0, np.random.default_rng(0)).scaled(0.5)
    spec = ChainSpec(s, e, np.eye(2) / 2, BoundarySequence.constant(np.eye(2), 8), validate=False)
    rep = stabilization_check(spec, CorrelationQuery([np.eye(2)]), 5)
    assert np.allclose(rep.ratios, 0.5)
    assert np.all(np.abs(np.diff(np.abs(rep.differences))) > 0)


# ---- finite-volume states ------------------------------------------------------------


def test_product_chain_density_matrix():
    spec, rho0, sigma = product_chain(5)
    for n in range(4):
        st_ = density_matrix(spec, n)
        expected = rho0
        for _ in range(n):
            expected = np.kron(expected, sigma)
        assert np.abs(st_.rho - expected).max() < 1e-12
        assert st_.checks.passed


def test_density_matrix_n0_is_initial_state():
    # holds whenever E(x 1) = x, as for the product kernel
    spec = product_chain(4, seed=5)[0]
    assert np.abs(density_matrix(spec, 0).rho - spec.initial_state).max() < 1e-12


def test_classical_chain_density_matrix_is_diagonal():
    s = tensor_lattice(4)
    p = np.array([[0.3, 0.7], [0.9, 0.1]])
    pi = np.array([0.4, 0.6])
    spec = ChainSpec(s, classical_kernel(s, 0, p), np.diag(pi))
    rho = density_matrix(spec, 2).rho
    assert np.abs(rho - np.diag(np.diag(rho))).max() < 1e-14
    joint = np.array([pi[i] * p[i, j] * p[j, k] for i, j, k in itertools.product(range(2), repeat=3)])
    assert np.abs(np.diag(rho) - joint).max() < 1e-14


@pytest.mark.parametrize("fermi", [False, True])
def test_density_matrix_reconstruction(fermi):
    spec = random_chain(5, seed=11, fermi=fermi)
    for n in range(4):
        st_ = density_matrix(spec, n)
        assert st_.checks.passed, [(c.name, c.residual) for c in st_.checks.failures]


def test_defective_boundary_raises_state_defect():
    s = tensor_lattice(4)
    e = classical_kernel(s, 0, np.eye(2))
    b = BoundarySequence([np.eye(2), np.eye(2), np.diag([1.0, -1.0]), np.eye(2)])
    spec = ChainSpec(s, e, np.eye(2) / 2, b)
    with pytest.raises(StateDefectError) as exc:
        density_matrix(spec, 1)
    assert exc.value.min_eigenvalue == pytest.approx(-0.5)
    loose = density_matrix(spec, 1, strict=False)
    assert not loose.checks["psd"].passed
    assert not spec.checks()["boundary_psd"].passed


@given(seeds)
def test_finite_volume_state_is_a_state(seed):
    spec = random_chain(4, seed=seed, fermi=bool(seed % 2))
    st_ = density_matrix(spec, 2)
    assert st_.checks.passed
    assert abs(st_.expectation(np.eye(8)) - 1) < 1e-12


# ---- projectivity, compatibility, classification -------------------------------------


def test_projectivity_with_martingale_boundary():
    spec = random_chain(5, seed=4, fermi=True)
    for n in range(3):
        chk = check_projectivity(spec, n)
        assert chk.passed and chk.residual < 1e-10
    assert check_projectivity(product_chain(5)[0], 1).passed


def test_projectivity_gap_equals_evaluation_gap():
    spec = random_chain(5, seed=8)
    bad = spec.with_boundaries(BoundarySequence.constant(np.diag([2.0, 1.0]), 5))
    chk = check_projectivity(bad, 0)
    basis = bad.structure.local_site_basis(0).elements
    gaps = [abs(evaluate(bad, CorrelationQuery([a], 1)) - evaluate(bad, CorrelationQuery([a], 0))) for a in basis]
    assert not chk.passed
    assert chk.residual == pytest.approx(max(gaps), abs=1e-14)


def test_product_chain_compatible_everywhere():
    spec = product_chain(6)[0]
    for n in range(4):
        assert check_compatibility(spec, n).passed


def test_amplitude_kernel_compatible():
    # E0 projects onto M2 (x) 1 with the uniform state; K = 1 (x) k commutes with its range
    full = SpanBasis(matrix_units(4))
    left = SpanBasis([np.kron(u, np.eye(2)) for u in matrix_units(2)])

    def e0_fn(x):
        return np.kron(np.einsum("abcb->ac", x.reshape(2, 2, 2, 2)) / 2, np.eye(2))

    e0 = CpMap.from_function(e0_fn, full, left)
    k = normalize_amplitude(e0, np.kron(np.eye(2), random_matrix(np.random.default_rng(9), 2)))
    amp = amplitude_qce(e0, k, left)
    s = tensor_lattice(5)
    kernels = [
        TransitionExpectation.from_function(s, n, lambda x: amp.apply(x).reshape(2, 2, 2, 2)[:, 0, :, 0])
        for n in range(4)
    ]
    spec = ChainSpec(s, kernels, random_density(np.random.default_rng(0), 2))
    for n in range(3):
        assert check_compatibility(spec, n).passed


def test_random_cp_kernel_incompatible():
    spec = random_chain(5, seed=42)
    chk = check_compatibility(spec, 1)
    assert not chk.passed
    assert chk.residual > 1e-6
    assert set(chk.witness) == {"past", "a_n", "a_n+1", "lhs", "rhs"}
    with pytest.raises(HorizonError):
        check_compatibility(spec, 3)


def test_classify_product_chain():
    rep = classify(product_chain(5)[0])
    assert rep.verdict is Verdict.MARKOV_STATE
    assert rep.n_max == 2


def test_classify_random_even_fermi_chain():
    rep = classify(random_chain(5, seed=3, fermi=True))
    assert rep.verdict is Verdict.MARKOV_CHAIN
    assert rep.failing.startswith("compatibility")
    assert rep.checks[rep.failing].residual > 1e-6


def test_classify_defective_boundary_indeterminate():
    spec = random_chain(5, seed=8)
    bad = spec.with_boundaries(BoundarySequence.constant(np.diag([2.0, 1.0]), 5))
    rep = classify(bad)
    assert rep.verdict is Verdict.INDETERMINATE
    assert rep.failing.startswith("stabilization")


def test_classify_horizon_bounds():
    spec = product_chain(4)[0]
    with pytest.raises(HorizonError):
        classify(spec, n_max=2)
    assert product_values(spec, 1).shape == (16,)
