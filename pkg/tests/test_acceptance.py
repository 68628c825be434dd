"""Acceptance criteria AC1-AC11, each reported as one PASS/FAIL line."""
import itertools
import time

import numpy as np
import pytest

from qmarkov.chain import (
    ChainSpec,
    CorrelationQuery,
    Verdict,
    boundary_transfer,
    classify,
    density_matrix,
    evaluate,
    product_values,
    solve_boundary_homogeneous,
    stabilization_check,
    unit_radius_kraus_kernel,
)
from qmarkov.kernel import (
    classical_kernel,
    extend,
    is_even,
    odd_perturbation,
    product_kernel,
    random_even_kernel,
    random_tensor_kernel,
    star_map_check,
    trace_like_check,
    verify_compat_E_E0,
)
from qmarkov.lattice import Kind, LatticeSpec, build_lattice
from qmarkov.linalg import SpanBasis, commutant_of, random_density, random_matrix, span_residual
from qmarkov.maps import BlockMatrix, schur, schur_tensor

pytestmark = pytest.mark.acceptance


def compositions(m):
    """All ordered ways of splitting ``m`` modes into consecutive nonempty sites."""
    for cuts in itertools.product([False, True], repeat=m - 1):
        dims, run = [], 1
        for c in cuts:
            if c:
                dims.append(run)
                run = 1
            else:
                run += 1
        dims.append(run)
        yield tuple(dims)


def test_ac1_car_exactness(record_ac):
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for m in range(1, 7):
        for dims in compositions(m):
            s = build_lattice(LatticeSpec(Kind.FERMI, dims, len(dims)))
            worst = max(worst, s.car_residual())
            count += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and elapsed < 1.0
    record_ac("AC1", ok, f"{count} Fermi lattices up to 6 modes, max CAR residual {worst:.2e}, {elapsed:.2f} s")
    assert ok


def test_ac2_commutant_formula(record_ac):
    t0 = time.perf_counter()
    s = build_lattice(LatticeSpec(Kind.FERMI, (1,), 4))
    d = s.ambient_dim
    worst, dims_ok = 0.0, True
    for r in range(5):
        for sites in itertools.combinations(range(4), r):
            formula = s.commutant_formula(sites, validate=False)
            gens = s.algebra_generators(sites)
            if gens:
                numeric = commutant_of(gens, d, s.tol)
            else:
                numeric = SpanBasis(np.eye(d * d).reshape(-1, d, d), check=False)
            dims_ok &= len(formula) == len(numeric)
            worst = max(worst, span_residual(formula, numeric), span_residual(numeric, formula))
    elapsed = time.perf_counter() - t0
    ok = dims_ok and worst < 1e-9 and elapsed < 10.0
    record_ac("AC2", ok, f"16 subsets of 4 one-mode sites, dimensions match {dims_ok}, residual {worst:.2e}, {elapsed:.2f} s")
    assert ok


def test_ac3_schur_positivity(record_ac):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_s, worst_t = np.inf, np.inf
    for _ in range(200):
        m = int(rng.integers(1, 5))
        # Schur product: blocks from the commuting subalgebras M2 (x) 1 and 1 (x) M2
        rows_a = [[np.kron(random_matrix(rng, 2), np.eye(2)) for _ in range(m)] for _ in range(2)]
        rows_b = [[np.kron(np.eye(2), random_matrix(rng, 2)) for _ in range(m)] for _ in range(2)]
        a, b = BlockMatrix.gram(np.array(rows_a)), BlockMatrix.gram(np.array(rows_b))
        worst_s = min(worst_s, schur(a, b).min_eigenvalue())
        d1, d2 = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        p = BlockMatrix.gram(np.array([[random_matrix(rng, d1) for _ in range(m)] for _ in range(2)]))
        q = BlockMatrix.gram(np.array([[random_matrix(rng, d2) for _ in range(m)] for _ in range(2)]))
        worst_t = min(worst_t, schur_tensor(p, q).min_eigenvalue())
    elapsed = time.perf_counter() - t0
    ok = worst_s >= -1e-9 and worst_t >= -1e-9 and elapsed < 10.0
    record_ac("AC3", ok, f"200+200 trials, min eigenvalue schur {worst_s:.2e}, tensor {worst_t:.2e}, {elapsed:.2f} s")
    assert ok


def test_ac4_extension_cp(record_ac, tensor4, fermi4):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = np.inf
    for i in range(50):
        n = i % 3
        for s, make in ((tensor4, random_tensor_kernel), (fermi4, random_even_kernel)):
            q = extend(make(s, n, rng), verify_cp=False)
            worst = min(worst, q.choi().min_eigenvalue)
    elapsed = time.perf_counter() - t0
    ok = worst >= -1e-9 and elapsed < 60.0
    record_ac("AC4", ok, f"50 tensor + 50 even Fermi kernels, min Choi eigenvalue {worst:.2e}, {elapsed:.2f} s")
    assert ok


def _id_tensor_kernel(q, x):
    """``id (x) E`` built directly from the bond kernel, block by block."""
    p, d, r = q.prefix_dim, q.kernel.dim, q.r
    blocks = x.reshape(p, d, p, d).transpose(0, 2, 1, 3)
    out = np.array([[q.kernel.apply(blocks[i, j]) for j in range(p)] for i in range(p)])
    return out.transpose(0, 2, 1, 3).reshape(p * r, p * r)


def test_ac5_tensor_reduction(record_ac, tensor4):
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(20):
        q = extend(random_tensor_kernel(tensor4, i % 3, rng), verify_cp=False)
        x = random_matrix(rng, q.dom_dim)
        oracle = _id_tensor_kernel(q, x)
        worst = max(worst, np.abs(q.apply(x) - oracle).max(), np.abs(q.apply_by_basis(x) - oracle).max())
    ok = worst < 1e-12
    record_ac("AC5", ok, f"20 random tensor kernels, max |E~ - id(x)E| = {worst:.2e}")
    assert ok


def test_ac6_star_and_even_equivalences(record_ac, fermi4):
    rng = np.random.default_rng(6)
    agree_star = agree_even = 0
    verdicts = []
    for i in range(100):
        e = random_even_kernel(fermi4, 1 + i % 2, rng)
        if i >= 50:
            e = odd_perturbation(e, rng, eps=float(rng.uniform(0.05, 1.0)))
        q = extend(e, check=False, verify_cp=False)
        star, trace_like = bool(star_map_check(q)), bool(trace_like_check(q))
        even, compat = bool(is_even(e)), bool(verify_compat_E_E0(e))
        agree_star += star == trace_like
        agree_even += even == compat
        verdicts.append(even)
    n_even = sum(verdicts)
    ok = agree_star == 100 and agree_even == 100 and n_even == 50
    record_ac("AC6", ok, f"*-map<->trace-like {agree_star}/100, even<->E.E0=E {agree_even}/100, {n_even} even verdicts")
    assert ok


def _unit_radius_even_kernel(structure, rng):
    e = random_even_kernel(structure, 0, rng, unital=False)
    radius = float(np.max(np.abs(np.linalg.eigvals(boundary_transfer(e)))))
    return e.scaled(1.0 / radius)


def test_ac7_martingale_stabilization(record_ac):
    rng = np.random.default_rng(7)
    chains = []
    tensor = build_lattice(LatticeSpec(Kind.TENSOR, (2,), 10))
    e = unit_radius_kraus_kernel(tensor, 0, [random_matrix(rng, 4, 2), random_matrix(rng, 4, 2)])
    chains.append(ChainSpec(tensor, e, random_density(rng, 2)))
    fermi = build_lattice(LatticeSpec(Kind.FERMI, (1,), 10))
    chains.append(ChainSpec(fermi, _unit_radius_even_kernel(fermi, rng), np.diag([0.4, 0.6])))
    worst, solved, count = 0.0, True, 0
    for spec in chains:
        rep = solve_boundary_homogeneous(spec)
        solved &= rep.found
        if not rep.found:
            continue
        spec = spec.with_boundaries(rep.boundary)
        for j in range(15):
            n = j % 3
            q = CorrelationQuery([random_matrix(rng, 2) for _ in range(n + 1)])
            st = stabilization_check(spec, q, 5, 1e-10)
            scale = max(1.0, float(np.max(np.abs(st.values))))
            worst = max(worst, float(np.max(np.abs(st.differences[1:]))) / scale)
            count += 1
    ok = solved and count == 30 and worst < 1e-10
    record_ac("AC7", ok, f"{count} queries on 2 solved chains, max |value(k+1) - value(k)| for k = 1..5: {worst:.2e}")
    assert ok


def test_ac8_classical_oracle(record_ac):
    rng = np.random.default_rng(8)
    worst, total = 0.0, 0
    for d in (2, 3):
        p = rng.random((d, d))
        p /= p.sum(axis=1, keepdims=True)
        pi = rng.random(d)
        pi /= pi.sum()
        s = build_lattice(LatticeSpec(Kind.TENSOR, (d,), 6))
        spec = ChainSpec(s, classical_kernel(s, 0, p), np.diag(pi))
        for path in itertools.product(range(d), repeat=5):
            prob = pi[path[0]]
            for a, b in zip(path, path[1:]):
                prob *= p[a, b]
            obs = [np.diag(np.eye(d)[i]) for i in path]
            worst = max(worst, abs(evaluate(spec, CorrelationQuery(obs)) - prob))
            total += 1
    ok = worst < 1e-12
    record_ac("AC8", ok, f"{total} path probabilities (P of size 2 and 3, length 5), max error {worst:.2e}")
    assert ok


def test_ac9_product_factorization(record_ac):
    rng = np.random.default_rng(9)
    s = build_lattice(LatticeSpec(Kind.TENSOR, (2,), 6))
    rho0, sigma = random_density(rng, 2), random_density(rng, 2)
    spec = ChainSpec(s, product_kernel(s, 0, sigma), rho0)
    basis = s.local_site_basis(0).elements
    first = np.array([np.trace(rho0 @ a) for a in basis])
    later = np.array([np.trace(sigma @ a) for a in basis])
    worst = 0.0
    for n in range(5):
        oracle = first
        for _ in range(n):
            oracle = np.kron(oracle, later)
        worst = max(worst, np.abs(product_values(spec, n) - oracle).max())
    ok = worst < 1e-12
    record_ac("AC9", ok, f"full product basis for n = 0..4, max error {worst:.2e}")
    assert ok


def _reference_chains():
    rng = np.random.default_rng(10)
    t = build_lattice(LatticeSpec(Kind.TENSOR, (2,), 6))
    tensor = ChainSpec(t, [random_tensor_kernel(t, n, rng) for n in range(5)], random_density(rng, 2))
    f = build_lattice(LatticeSpec(Kind.FERMI, (1,), 6))
    fermi = ChainSpec(f, [random_even_kernel(f, n, rng) for n in range(5)], np.diag([0.35, 0.65]))
    return {"tensor": tensor, "fermi": fermi}


def test_ac10_reconstruction(record_ac):
    trace_err, min_eig, recon = 0.0, np.inf, 0.0
    for spec in _reference_chains().values():
        s = spec.structure
        for n in range(5):
            st = density_matrix(spec, n, reconstruct=False)
            trace_err = max(trace_err, abs(np.trace(st.rho) - 1))
            min_eig = min(min_eig, float(np.linalg.eigvalsh((st.rho + st.rho.conj().T) / 2)[0]))
            elems = s.local_product_elements(0, n)[0]
            site_bases = [s.local_site_basis(i).elements for i in range(n + 1)]
            for prod, idx in zip(elems, itertools.product(*(range(len(b)) for b in site_bases))):
                nested = evaluate(spec, CorrelationQuery([site_bases[i][j] for i, j in enumerate(idx)]))
                recon = max(recon, abs(np.trace(st.rho @ prod) - nested))
    ok = trace_err <= 1e-12 and min_eig >= -1e-10 and recon <= 1e-10
    record_ac("AC10", ok, f"tensor + Fermi, n = 0..4: |tr - 1| {trace_err:.2e}, min eigenvalue {min_eig:.2e}, reconstruction {recon:.2e}")
    assert ok


def test_ac11_classification(record_ac):
    rng = np.random.default_rng(11)
    t = build_lattice(LatticeSpec(Kind.TENSOR, (2,), 5))
    product = ChainSpec(t, product_kernel(t, 0, random_density(rng, 2)), random_density(rng, 2))
    v_product = classify(product).verdict
    f = build_lattice(LatticeSpec(Kind.FERMI, (1,), 5))
    fermi = ChainSpec(f, [random_even_kernel(f, n, rng) for n in range(4)], np.diag([0.5, 0.5]))
    rep = classify(fermi)
    residual = rep.checks[rep.failing].residual if rep.failing else 0.0
    ok = v_product is Verdict.MARKOV_STATE and rep.verdict is Verdict.MARKOV_CHAIN and residual > 1e-6
    record_ac("AC11", ok, f"product chain {v_product.value}; random even Fermi chain {rep.verdict.value}, witness residual {residual:.2e}")
    assert ok
