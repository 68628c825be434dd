"""Quantum Markov chains on tensor and CAR lattices at finite horizon.

Layers, bottom up: ``linalg`` (spans, commutants, PSD tools), ``lattice``
(matrix realisations and local coordinates), ``maps`` (Choi matrices,
complete positivity, conditional expectations), ``kernel`` (bond
transition expectations and their extension to the past), ``chain``
(boundaries, correlations, finite-volume states, classification) and
``cli``.
"""
from .chain import (
    BoundarySequence,
    ChainSpec,
    CorrelationQuery,
    FiniteVolumeState,
    Provenance,
    Verdict,
    check_compatibility,
    check_projectivity,
    classify,
    density_matrix,
    evaluate,
    normalize_initial,
    solve_boundary_homogeneous,
    stabilization_check,
    trivial_boundary,
)
from .checks import Check, CheckSuite
from .kernel import ExtendedQce, TransitionExpectation, extend, verify_markov_property, verify_qce
from .lattice import Kind, LatticeSpec, LocalStructure, build_lattice
from .linalg import DEFAULT_TOL, SpanBasis, ToleranceConfig
from .maps import CpMap, choi, is_completely_positive

__all__ = [
    "BoundarySequence",
    "ChainSpec",
    "Check",
    "CheckSuite",
    "CorrelationQuery",
    "CpMap",
    "DEFAULT_TOL",
    "ExtendedQce",
    "FiniteVolumeState",
    "Kind",
    "LatticeSpec",
    "LocalStructure",
    "Provenance",
    "SpanBasis",
    "ToleranceConfig",
    "TransitionExpectation",
    "Verdict",
    "build_lattice",
    "check_compatibility",
    "check_projectivity",
    "choi",
    "classify",
    "density_matrix",
    "evaluate",
    "extend",
    "is_completely_positive",
    "normalize_initial",
    "solve_boundary_homogeneous",
    "stabilization_check",
    "trivial_boundary",
    "verify_markov_property",
    "verify_qce",
]
