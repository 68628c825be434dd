"""JSON run configurations: schema, matrix literals and chain construction."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .chain import BoundarySequence, ChainSpec, CorrelationQuery, Provenance, solve_boundary_homogeneous
from .errors import DimensionCapError, QMarkovError
from .kernel import (
    TransitionExpectation,
    classical_kernel,
    odd_perturbation,
    odd_range_perturbation,
    product_kernel,
    random_even_kernel,
    random_tensor_kernel,
    transpose_kernel,
)
from .lattice import MODE_FAMILIES, Kind, LatticeSpec, LocalStructure, build_lattice, _tensor_site_family
from .linalg import DEFAULT_TOL, ToleranceConfig

_NUMBER = {"type": "number"}
_COMPLEX = {"oneOf": [_NUMBER, {"type": "array", "items": _NUMBER, "minItems": 2, "maxItems": 2}]}
_MATRIX = {"type": "array", "minItems": 1, "items": {"type": "array", "minItems": 1, "items": _COMPLEX}}
_MATRICES = {"type": "array", "items": _MATRIX}

KERNEL_SCHEMA = {
    "type": "object",
    "required": ["type"],
    "properties": {
        "type": {
            "enum": ["product", "identity", "classical", "kraus", "images", "matrix", "random_cp", "random_even", "transpose"]
        },
        "state": _MATRIX,
        "transition": {"type": "array", "items": {"type": "array", "items": _NUMBER}},
        "operators": _MATRICES,
        "scale": _NUMBER,
        "images": _MATRICES,
        "variant": {"enum": list(MODE_FAMILIES)},
        "matrix": _MATRIX,
        "rank": {"type": "integer", "minimum": 1},
        "odd_perturbation": _NUMBER,
        "odd_range_perturbation": _NUMBER,
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["lattice"],
    "properties": {
        "lattice": {
            "type": "object",
            "required": ["kind", "site_dims", "horizon"],
            "properties": {
                "kind": {"enum": ["tensor", "fermi"]},
                "site_dims": {
                    "oneOf": [
                        {"type": "integer", "minimum": 1},
                        {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
                    ]
                },
                "horizon": {"type": "integer", "minimum": 2},
                "cap": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "kernel": KERNEL_SCHEMA,
        "kernels": {"type": "array", "minItems": 1, "items": KERNEL_SCHEMA},
        "initial_state": _MATRIX,
        "boundaries": {
            "type": "object",
            "required": ["mode"],
            "properties": {
                "mode": {"enum": ["trivial", "solve", "user"]},
                "matrix": _MATRIX,
                "matrices": _MATRICES,
            },
            "additionalProperties": False,
        },
        "tolerances": {
            "type": "object",
            "properties": {"eig_tol": _NUMBER, "eq_tol": _NUMBER, "rank_tol": _NUMBER},
            "additionalProperties": False,
        },
        "seed": {"type": "integer", "minimum": 0},
    },
    "oneOf": [{"required": ["kernel"]}, {"required": ["kernels"]}],
    "additionalProperties": False,
}

OBSERVABLES_SCHEMA = {
    "type": "object",
    "required": ["queries"],
    "properties": {
        "queries": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["observables"],
                "properties": {
                    "label": {"type": "string"},
                    "observables": {"type": "array", "minItems": 1, "items": {"oneOf": [{"type": "string"}, _MATRIX]}},
                },
                "additionalProperties": False,
            },
        },
        "k_max": {"type": "integer", "minimum": 0},
    },
    "additionalProperties": False,
}


class ConfigError(QMarkovError, ValueError):
    """Invalid input file; ``code`` is one of ``io``, ``schema``, ``dimension``, ``cap``, ``value``."""

    def __init__(self, code: str, message: str, location: str = ""):
        super().__init__(f"[{code}] {location + ': ' if location else ''}{message}")
        self.code = code
        self.location = location


def parse_matrix(data, location: str = "") -> np.ndarray:
    """Row-major nested list with real entries or ``[re, im]`` pairs."""
    try:
        rows = [[complex(x[0], x[1]) if isinstance(x, list) else complex(x) for x in row] for row in data]
    except (TypeError, IndexError) as exc:
        raise ConfigError("schema", f"malformed matrix literal ({exc})", location) from None
    if len({len(r) for r in rows}) != 1 or len(rows) != len(rows[0]):
        raise ConfigError("dimension", f"matrix literal must be square, got {len(rows)} rows of lengths {sorted({len(r) for r in rows})}", location)
    return np.array(rows, dtype=complex)


def encode_complex(z) -> list:
    z = complex(z)
    return [float(z.real), float(z.imag)]


def encode_matrix(m) -> list:
    return [[encode_complex(x) for x in row] for row in np.asarray(m)]


def _validate(data, schema, what: str):
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        loc = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError("schema", f"{what}: {err.message}", loc)


def _load_json(path, what: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("io", f"cannot read {what} ({exc.strerror})", str(path)) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("schema", f"invalid JSON: {exc.msg}", f"{path}:{exc.lineno}:{exc.colno}") from None


@dataclass
class RunConfig:
    lattice: LatticeSpec
    kernels: list
    initial_state: np.ndarray | None
    boundaries: dict
    tol: ToleranceConfig = DEFAULT_TOL
    seed: int = 0
    homogeneous: bool = True
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        _validate(data, CONFIG_SCHEMA, "config")
        lat = data["lattice"]
        dims = lat["site_dims"]
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        try:
            spec = LatticeSpec(Kind(lat["kind"]), dims, lat["horizon"], lat.get("cap", 4096))
        except DimensionCapError as exc:
            raise ConfigError("cap", str(exc), "lattice") from None
        except ValueError as exc:
            raise ConfigError("dimension", str(exc), "lattice") from None
        try:
            tol = ToleranceConfig(**data.get("tolerances", {}))
        except ValueError as exc:
            raise ConfigError("value", str(exc), "tolerances") from None
        if "kernel" in data:
            kernels, homogeneous = [data["kernel"]], True
        else:
            kernels, homogeneous = data["kernels"], False
            if len(kernels) != spec.horizon - 1:
                raise ConfigError("dimension", f"{len(kernels)} kernels given for {spec.horizon - 1} bonds", "kernels")
        rho = None
        if "initial_state" in data:
            rho = parse_matrix(data["initial_state"], "initial_state")
            r0 = spec.block_dim(0)
            if rho.shape != (r0, r0):
                raise ConfigError("dimension", f"initial state must be {r0}x{r0}, got {rho.shape[0]}x{rho.shape[1]}", "initial_state")
        return cls(spec, kernels, rho, data.get("boundaries", {"mode": "trivial"}), tol, data.get("seed", 0), homogeneous, data)

    def with_overrides(self, tol: float | None = None, seed: int | None = None) -> "RunConfig":
        out = RunConfig(**{**self.__dict__})
        if tol is not None:
            try:
                out.tol = ToleranceConfig.uniform(tol)
            except ValueError as exc:
                raise ConfigError("value", str(exc), "--tol") from None
        if seed is not None:
            out.seed = seed
        return out

    # ---- construction ---------------------------------------------------------------

    def structure(self) -> LocalStructure:
        return build_lattice(self.lattice, self.tol)

    def build_kernels(self, structure: LocalStructure) -> list[TransitionExpectation]:
        """One kernel per bond, constructed without enforcing the Markov property (it is reported instead)."""
        rng = np.random.default_rng(self.seed)
        if self.homogeneous:
            first = _build_kernel(self.kernels[0], structure, 0, rng, "kernel")
            out = [first]
            for s in range(1, structure.horizon - 1):
                if structure.block_dims[s : s + 2] != structure.block_dims[:2]:
                    raise ConfigError("dimension", "a single kernel needs identical site dimensions on every bond", "kernel")
                out.append(first.at_site(s, structure, check_markov=False))
            return out
        return [_build_kernel(k, structure, s, rng, f"kernels/{s}") for s, k in enumerate(self.kernels)]

    def chain(self, structure: LocalStructure | None = None, validate: bool = False):
        """The configured chain and, for ``mode = solve``, the boundary solver report (else ``None``)."""
        structure = structure or self.structure()
        kernels = self.build_kernels(structure)
        r0 = structure.block_dims[0]
        rho = self.initial_state if self.initial_state is not None else np.eye(r0) / r0
        spec = ChainSpec(structure, kernels, rho, None, tol=self.tol, validate=validate)
        mode, report = self.boundaries["mode"], None
        if mode == "user":
            spec = spec.with_boundaries(self._user_boundaries(structure))
        elif mode == "solve":
            report = solve_boundary_homogeneous(spec, self.tol)
            if report.found:
                spec = spec.with_boundaries(report.boundary)
        return spec, report

    def _user_boundaries(self, structure: LocalStructure) -> BoundarySequence:
        h = structure.horizon
        if "matrix" in self.boundaries:
            mats = [parse_matrix(self.boundaries["matrix"], "boundaries/matrix")] * h
        elif "matrices" in self.boundaries:
            mats = [parse_matrix(m, f"boundaries/matrices/{i}") for i, m in enumerate(self.boundaries["matrices"])]
        else:
            raise ConfigError("schema", "user boundaries need 'matrix' or 'matrices'", "boundaries")
        if len(mats) != h:
            raise ConfigError("dimension", f"{len(mats)} boundary matrices for {h} sites", "boundaries")
        for i, b in enumerate(mats):
            r = structure.block_dims[i]
            if b.shape != (r, r):
                raise ConfigError("dimension", f"boundary {i} must be {r}x{r}", f"boundaries/{i}")
        return BoundarySequence(mats, Provenance.USER_SUPPLIED)


def _check_shape(m: np.ndarray, shape, location: str):
    if m.shape != shape:
        raise ConfigError("dimension", f"expected a {shape[0]}x{shape[1]} matrix, got {m.shape[0]}x{m.shape[1]}", location)


def _build_kernel(cfg: dict, structure: LocalStructure, site: int, rng, location: str) -> TransitionExpectation:
    kind = cfg["type"]
    r, r2 = structure.block_dims[site], structure.block_dims[site + 1]
    dim = r * r2
    tensor_only = kind in ("product", "identity", "classical", "transpose")
    if tensor_only and structure.is_fermi:
        raise ConfigError("value", f"kernel type {kind!r} is only available on tensor lattices", location)
    if kind in ("product", "transpose"):
        if "state" not in cfg:
            raise ConfigError("schema", f"kernel type {kind!r} needs 'state'", location)
        sigma = parse_matrix(cfg["state"], f"{location}/state")
        _check_shape(sigma, (r2, r2), f"{location}/state")
        e = (product_kernel if kind == "product" else transpose_kernel)(structure, site, sigma)
    elif kind == "identity":
        e = product_kernel(structure, site, np.eye(r2) / r2)
    elif kind == "classical":
        p = np.asarray(cfg.get("transition", []), dtype=float)
        if p.shape != (r, r2):
            raise ConfigError("dimension", f"transition matrix must be {r}x{r2}", f"{location}/transition")
        try:
            e = classical_kernel(structure, site, p)
        except ValueError as exc:
            raise ConfigError("value", str(exc), location) from None
    elif kind == "kraus":
        ops = [parse_matrix_rect(m, f"{location}/operators/{i}") for i, m in enumerate(cfg.get("operators", []))]
        if not ops:
            raise ConfigError("schema", "kraus kernel needs 'operators'", location)
        for i, k in enumerate(ops):
            _check_shape(k, (dim, r), f"{location}/operators/{i}")
        e = TransitionExpectation.from_kraus(structure, site, ops, scale=cfg.get("scale", 1.0), check_markov=False)
    elif kind == "images":
        variant = cfg.get("variant", "standard")
        imgs = [parse_matrix(m, f"{location}/images/{i}") for i, m in enumerate(cfg.get("images", []))]
        if len(imgs) != dim * dim:
            raise ConfigError("dimension", f"expected {dim * dim} images (one per basis element of the bond), got {len(imgs)}", f"{location}/images")
        for i, m in enumerate(imgs):
            _check_shape(m, (r, r), f"{location}/images/{i}")
        e = TransitionExpectation.from_images(structure, site, imgs, variant=variant, check_markov=False)
    elif kind == "matrix":
        m = parse_matrix_rect(cfg.get("matrix"), f"{location}/matrix")
        _check_shape(m, (r * r, dim * dim), f"{location}/matrix")
        e = TransitionExpectation.from_matrix(structure, site, m, check_markov=False)
    elif kind == "random_cp":
        e = random_tensor_kernel(structure, site, rng, cfg.get("rank", 2))
    else:
        e = random_even_kernel(structure, site, rng, cfg.get("rank", 2))
    if "odd_perturbation" in cfg:
        e = odd_perturbation(e, rng, cfg["odd_perturbation"])
    if "odd_range_perturbation" in cfg:
        e = odd_range_perturbation(e, rng, cfg["odd_range_perturbation"])
    return e


def parse_matrix_rect(data, location: str = "") -> np.ndarray:
    if data is None:
        raise ConfigError("schema", "missing matrix", location)
    try:
        rows = [[complex(x[0], x[1]) if isinstance(x, list) else complex(x) for x in row] for row in data]
    except (TypeError, IndexError) as exc:
        raise ConfigError("schema", f"malformed matrix literal ({exc})", location) from None
    if len({len(r) for r in rows}) != 1:
        raise ConfigError("dimension", "matrix rows have different lengths", location)
    return np.array(rows, dtype=complex)


def parse_spec(path) -> RunConfig:
    """Load and validate a JSON run configuration."""
    return RunConfig.from_dict(_load_json(path, "config"))


# ---- observables ----------------------------------------------------------------------


def named_site_operators(structure: LocalStructure, n: int) -> dict[str, np.ndarray]:
    """Site operators addressable by name in observables files."""
    names: dict[str, np.ndarray] = {}
    if structure.is_fermi:
        for variant in ("hermitian", "ladder", "standard"):
            elems = structure.local_site_basis(n, variant).elements
            names.update(zip(structure.local_site_labels(n, variant), elems))
    else:
        d = structure.block_dims[n]
        for variant in ("hermitian", "units"):
            mats, labels = _tensor_site_family(d, variant)
            names.update(zip(labels, mats))
    names["1"] = np.eye(structure.block_dims[n], dtype=complex)
    return names


@dataclass
class QuerySet:
    queries: list
    labels: list
    k_max: int | None = None


def parse_observables(path, structure: LocalStructure) -> QuerySet:
    data = _load_json(path, "observables")
    _validate(data, OBSERVABLES_SCHEMA, "observables")
    queries, labels = [], []
    for qi, q in enumerate(data["queries"]):
        obs = []
        for i, o in enumerate(q["observables"]):
            loc = f"queries/{qi}/observables/{i}"
            if i >= structure.horizon:
                raise ConfigError("dimension", f"observable on site {i} beyond horizon {structure.horizon}", loc)
            r = structure.block_dims[i]
            if isinstance(o, str):
                names = named_site_operators(structure, i)
                if o not in names:
                    raise ConfigError("value", f"unknown site operator {o!r} (known: {', '.join(sorted(names))})", loc)
                obs.append(names[o])
            else:
                m = parse_matrix(o, loc)
                _check_shape(m, (r, r), loc)
                obs.append(m)
        queries.append(CorrelationQuery(obs))
        labels.append(q.get("label", " ".join(x if isinstance(x, str) else "M" for x in q["observables"])))
    return QuerySet(queries, labels, data.get("k_max"))
