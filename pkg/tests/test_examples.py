"""Small worked cases for individual operations."""
import numpy as np
import pytest

from qmarkov.kernel import TransitionExpectation, umegaki_local, verify_compat_E_E0, verify_markov_property, random_tensor_kernel
from qmarkov.lattice import Kind, LatticeSpec, build_lattice
from qmarkov.linalg import (
    SpanBasis,
    commutant_of,
    dagger,
    expand_in_basis,
    is_psd,
    kron,
    matrix_units,
    psd_sqrt,
    random_matrix,
    spans_equal,
)
from qmarkov.maps import BlockMatrix, CpMap, amplitude_qce, ce_algebra_report, choi, is_completely_positive, schur, schur_tensor, verify_umegaki

SZ = np.diag([-1.0, 1.0])
FULL2 = SpanBasis(matrix_units(2))


@pytest.fixture(scope="module")
def fermi2():
    return build_lattice(LatticeSpec(Kind.FERMI, (1,), 2))


def test_kron_cases():
    assert np.array_equal(kron(np.eye(2), np.eye(2)), np.eye(4))
    assert np.array_equal(kron(SZ, np.eye(2)), np.diag([-1, -1, 1, 1]))


def test_psd_cases():
    assert is_psd(np.eye(4))
    assert not is_psd(np.diag([1.0, -1.0]))
    x = random_matrix(np.random.default_rng(0), 3)
    assert is_psd(dagger(x) @ x)
    assert np.allclose(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))
    assert np.allclose(psd_sqrt(np.eye(3)), np.eye(3))


def test_expansion_cases(fermi2):
    b = fermi2.local_product_basis(0, 1)
    assert np.allclose(expand_in_basis(b.elements[0], b), np.eye(16)[0])
    x = 2 * b.elements[0] + 3 * b.elements[1]
    assert np.allclose(expand_in_basis(x, b)[:3], [2, 3, 0])
    c = random_matrix(np.random.default_rng(1), 1, 16)[0]
    assert np.abs(b.synthesize(expand_in_basis(b.synthesize(c), b)) - b.synthesize(c)).max() < 1e-12


def test_commutant_cases(fermi2):
    assert len(commutant_of(list(matrix_units(3)), 3)) == 1
    gens = [fermi2.annihilator(0), fermi2.creator(0)]
    comm = commutant_of(gens, 4)
    assert len(comm) == 4
    assert spans_equal(comm, fermi2.commutant_formula([0]))[0]
    assert len(fermi2.commutant_formula([0, 1])) == 1
    assert len(fermi2.commutant_formula([])) == 16


def test_lattice_cases(fermi2):
    a0, a1 = fermi2.annihilator(0), fermi2.annihilator(1)
    assert np.allclose(a0 @ dagger(a0) + dagger(a0) @ a0, np.eye(4))
    assert np.allclose(a0 @ a0, 0)
    assert np.allclose(a0 @ a1 + a1 @ a0, 0)
    t = build_lattice(LatticeSpec(Kind.TENSOR, (2,), 3))
    assert t.ambient_dim == 8
    z0 = t.range_units(0, 0).embed(SZ)
    for u in matrix_units(2):
        y = t.range_units(1, 1).embed(u)
        assert np.allclose(z0 @ y, y @ z0)
    assert len(fermi2.local_site_basis(0, "ladder")) == 4
    assert len(fermi2.product_basis(0, 1)) == 4**2
    assert np.linalg.matrix_rank(t.product_basis(0, 1).gram) == 16


def test_theta_and_even_projection(fermi2):
    a0, a1 = fermi2.annihilator(0), fermi2.annihilator(1)
    n0 = dagger(a0) @ a0
    assert np.allclose(fermi2.theta([0], a0), -a0)
    assert np.allclose(fermi2.theta([0], n0), n0)
    x = random_matrix(np.random.default_rng(2), 4)
    assert np.allclose(fermi2.theta([0, 1], fermi2.theta([0, 1], x)), x)
    assert np.allclose(fermi2.even_projection([0, 1], a1), 0)
    assert np.allclose(fermi2.even_projection([0, 1], np.eye(4)), np.eye(4))
    assert np.allclose(fermi2.even_projection([0, 1], n0 + a0), n0)


def test_cpmap_cases():
    trace = CpMap.from_function(lambda x: np.trace(x) / 2 * np.eye(2), FULL2, FULL2)
    assert np.allclose(trace.apply(SZ), 0)
    assert np.allclose(choi(trace).matrix, np.eye(4) / 2)
    ident = CpMap.identity(FULL2)
    x = random_matrix(np.random.default_rng(0), 2)
    assert np.allclose(ident.apply(x), x)
    assert is_completely_positive(ident)
    k = random_matrix(np.random.default_rng(1), 2)
    kmap = CpMap.from_kraus([k], FULL2, FULL2)
    assert is_completely_positive(kmap)
    assert "CE4_unital" in {c.name for c in verify_umegaki(kmap, samples=5).failures}


def test_schur_cases():
    ones = BlockMatrix(np.ones((2, 2, 1, 1)))
    assert np.allclose(schur(ones, ones).blocks, ones.blocks)
    eye = BlockMatrix(np.einsum("ij,ab->ijab", np.eye(2), np.eye(2)))
    st = schur_tensor(eye, eye)
    assert np.allclose(st.assemble(), np.eye(8))
    rng = np.random.default_rng(3)
    left = [np.kron(random_matrix(rng, 2), np.eye(2)) for _ in range(3)]
    right = [np.kron(np.eye(2), random_matrix(rng, 2)) for _ in range(3)]
    a = BlockMatrix.gram(np.array([left]))
    b = BlockMatrix.gram(np.array([right]))
    assert schur(a, b).min_eigenvalue() >= -1e-9
    p = BlockMatrix.gram(np.array([[random_matrix(rng, 2) for _ in range(2)]]))
    q = BlockMatrix.gram(np.array([[random_matrix(rng, 2) for _ in range(2)]]))
    assert np.abs(schur(p, q).blocks - schur(q, p).blocks).max() > 1e-6


def test_ce_algebra_of_transpose_is_closed():
    t = CpMap.from_function(lambda x: x.T, FULL2, FULL2)
    rep = ce_algebra_report(t)
    assert rep.checks["product_closed"].passed
    assert len(rep.basis) >= 1


def test_amplitude_with_unit_k_reproduces_e0():
    full = SpanBasis(matrix_units(4))
    right = SpanBasis([np.kron(np.eye(2), u) for u in matrix_units(2)])
    e0 = CpMap.from_function(lambda x: np.kron(np.eye(2), np.einsum("abac->bc", x.reshape(2, 2, 2, 2))) / 2, full, right)
    amp = amplitude_qce(e0, np.eye(4), right)
    assert np.allclose(amp.images, e0.images)


def test_local_umegaki_cases():
    f = build_lattice(LatticeSpec(Kind.FERMI, (1,), 3))
    e0 = umegaki_local(f, 1)
    a = f.local_product(1, f.local_annihilator(1), np.eye(2))
    assert np.allclose(e0.apply(a), 0)
    assert np.allclose(e0.apply(e0.images), e0.images)
    t = build_lattice(LatticeSpec(Kind.TENSOR, (2,), 3))
    assert np.allclose(umegaki_local(t, 0).images, t.local_product_basis(0, 1).elements)
    assert verify_compat_E_E0(random_tensor_kernel(t, 0, np.random.default_rng(0)))


def test_markov_property_cases():
    f = build_lattice(LatticeSpec(Kind.FERMI, (1,), 3))
    a = f.local_annihilator(1)
    odd = TransitionExpectation.from_function(f, 1, lambda x: np.trace(x) * a, check_markov=False)
    assert not verify_markov_property(odd)
    t = build_lattice(LatticeSpec(Kind.TENSOR, (2,), 3))
    anything = TransitionExpectation.from_function(t, 1, lambda x: x[:2, :2] + x[2:, 2:].T, check_markov=False)
    assert verify_markov_property(anything)
