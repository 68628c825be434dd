"""Command-line front end: ``qmarkov {verify,eval,boundary,classify,report} --config PATH``.

Exit codes: 0 when every check passes, 1 when a verified property fails,
2 for input errors (unreadable or invalid files, dimension mismatches).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .chain import ChainSpec, Verdict, classify, solve_boundary_homogeneous, stabilization_check
from .checks import Check
from .config import ConfigError, RunConfig, encode_complex, encode_matrix, parse_observables, parse_spec
from .errors import HorizonError, NotInSpanError, PreconditionError, QMarkovError
from .kernel import ExtendedQce, is_even, umegaki_local, verify_compat_E_E0, verify_markov_property, verify_qce
from .maps import verify_umegaki

EXIT_OK, EXIT_FAILED, EXIT_INPUT = 0, 1, 2


def jsonable(x):
    """Plain JSON data; complex numbers become ``[re, im]`` pairs."""
    if isinstance(x, Check):
        return check_record(x)
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        if x.ndim == 2:
            return encode_matrix(x)
        return [jsonable(v) for v in x]
    if isinstance(x, (complex, np.complexfloating)):
        return encode_complex(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if hasattr(x, "value") and isinstance(getattr(x, "value"), str):
        return x.value
    return x


def check_record(c: Check) -> dict:
    rec = {"name": c.name, "pass": bool(c.passed), "residual": jsonable(float(c.residual))}
    if c.witness is not None:
        rec["witness"] = jsonable(c.witness)
    if c.detail:
        rec["detail"] = c.detail
    return rec


@dataclass
class Report:
    command: str
    checks: list = field(default_factory=list)
    values: dict = field(default_factory=dict)
    wall_time: float | None = None
    exit_code: int | None = None

    def add(self, check: Check, prefix: str = ""):
        name = f"{prefix}{check.name}"
        if any(r["name"] == name for r in self.checks):
            raise ValueError(f"check {name!r} reported twice")
        rec = check_record(check)
        rec["name"] = name
        self.checks.append(rec)

    def add_suite(self, suite, prefix: str = ""):
        for c in suite:
            self.add(c, prefix)

    def merge(self, other: "Report", prefix: str):
        for rec in other.checks:
            rec = dict(rec, name=prefix + rec["name"])
            self.checks.append(rec)
        self.values[prefix.rstrip(".")] = other.values

    @property
    def passed(self) -> bool:
        return all(r["pass"] for r in self.checks)

    def code(self) -> int:
        if self.exit_code is not None:
            return self.exit_code
        return EXIT_OK if self.passed else EXIT_FAILED

    def to_dict(self) -> dict:
        out = {"command": self.command, "passed": self.code() == EXIT_OK, "checks": self.checks, "values": jsonable(self.values)}
        if self.wall_time is not None:
            out["wall_time"] = self.wall_time
        return out

    def render(self, fmt: str = "json") -> str:
        data = self.to_dict()
        if fmt == "json":
            return json.dumps(data, indent=2) + "\n"
        if fmt == "csv":
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["record", "name", "pass", "residual", "data"])
            for r in data["checks"]:
                w.writerow(["check", r["name"], r["pass"], r["residual"], json.dumps(r.get("witness")) if "witness" in r else ""])
            for k, v in data["values"].items():
                w.writerow(["value", k, "", "", json.dumps(v)])
            if "wall_time" in data:
                w.writerow(["value", "wall_time", "", "", data["wall_time"]])
            return buf.getvalue()
        if fmt == "md":
            lines = [f"# qmarkov {self.command}", "", f"**{'PASS' if data['passed'] else 'FAIL'}**", ""]
            lines += ["| check | pass | residual |", "|---|---|---|"]
            lines += [f"| {r['name']} | {'yes' if r['pass'] else 'no'} | {r['residual']:.3e} |" if isinstance(r["residual"], float) else f"| {r['name']} | {'yes' if r['pass'] else 'no'} | {r['residual']} |" for r in data["checks"]]
            if data["values"]:
                lines += ["", "## values", "", "```json", json.dumps(data["values"], indent=2), "```"]
            if "wall_time" in data:
                lines += ["", f"wall time: {data['wall_time']:.3f} s"]
            return "\n".join(lines) + "\n"
        raise ValueError(f"unknown format {fmt!r}")


# ---- commands -------------------------------------------------------------------------


def _bonds_to_check(spec: ChainSpec, homogeneous: bool) -> range:
    # a replicated kernel only differs in the size of its past beyond bond 1
    return range(min(2, len(spec.kernels))) if homogeneous else range(len(spec.kernels))


def cmd_verify(config: RunConfig) -> Report:
    rep = Report("verify")
    structure = config.structure()
    rep.add_suite(structure.verify(), "lattice.")
    spec, boundary_report = config.chain(structure)
    unital = {}
    for s in _bonds_to_check(spec, config.homogeneous):
        e = spec.kernels[s]
        pre = f"kernel[{s}]."
        rep.add(verify_markov_property(e), pre)
        rep.add(is_even(e), pre)
        rep.add(verify_compat_E_E0(e), pre)
        c = e.choi()
        lam = c.min_eigenvalue
        ok = lam >= -config.tol.eig_tol * max(1.0, float(np.max(np.abs(c.eigenvalues))))
        rep.add(Check("completely_positive", ok, max(0.0, -lam), None if ok else c.min_eigenvector, detail="choi"), pre)
        unital[str(s)] = e.identity_residual()
        q = ExtendedQce(e)
        if q.dom_dim <= 64:
            rep.add_suite(verify_qce(q, config.tol, seed=config.seed), f"extension[{s}].")
        rep.add_suite(verify_umegaki(umegaki_local(structure, s), config.tol, seed=config.seed), f"umegaki[{s}].")
    chain_checks = spec.checks()
    rep.add_suite([c for c in chain_checks if c.name != "markov_property"], "chain.")
    if boundary_report is not None:
        rep.add(_solution_check(boundary_report), "chain.")
    rep.values = {"unital_residual": unital, "boundary_provenance": spec.boundaries.provenance.value}
    return rep


def _solution_check(report) -> Check:
    lam = report.leading_eigenvalue
    return Check("boundary_solution", report.found, abs(lam - 1), None if report.found else {"leading_eigenvalue": lam}, report.detail)


def cmd_eval(config: RunConfig, observables_path, k: int = 0) -> Report:
    rep = Report("eval")
    structure = config.structure()
    spec, _ = config.chain(structure)
    qs = parse_observables(observables_path, structure)
    out = []
    for i, (q, label) in enumerate(zip(qs.queries, qs.labels)):
        avail = spec.horizon - 2 - q.n
        if avail < k:
            raise ConfigError("dimension", f"query {i} with extension {k} needs {q.n + k + 2} sites, horizon is {spec.horizon}", f"queries/{i}")
        k_max = avail if qs.k_max is None else min(qs.k_max, avail)
        k_max = max(k_max, k)
        st = stabilization_check(spec, q, k_max)
        rep.add(st.to_check(f"stabilization[{i}]"))
        out.append({"label": label, "k": k, "value": st.values[k], "profile": st.values, "differences": st.differences})
    rep.values = {"queries": out}
    return rep


def cmd_boundary(config: RunConfig) -> Report:
    rep = Report("boundary")
    structure = config.structure()
    spec, _ = config.chain(structure)
    try:
        report = solve_boundary_homogeneous(spec, config.tol)
    except PreconditionError as exc:
        rep.add_suite(spec.boundaries.checks(structure, spec.kernels, config.tol), "boundary.")
        rep.values = {"solved": False, "detail": str(exc), "boundaries": spec.boundaries.elements}
        return rep
    rep.add(_solution_check(report), "boundary.")
    rep.add_suite(report.checks, "boundary.")
    values = {"solved": report.found, "leading_eigenvalue": report.leading_eigenvalue, "eigenvalues": report.eigenvalues}
    if report.found:
        values["b"] = report.boundary[0]
        values["c"] = report.boundary.factors[0]
    else:
        values["leading_eigenvector"] = report.leading_eigenvector
        values["detail"] = report.detail
    rep.values = values
    return rep


def cmd_classify(config: RunConfig) -> Report:
    """Exit code 0 for a decided verdict (MarkovState or MarkovChain), 1 for Indeterminate."""
    rep = Report("classify")
    structure = config.structure()
    spec, boundary_report = config.chain(structure)
    result = classify(spec)
    rep.add_suite(result.checks)
    rep.values = {"verdict": result.verdict.value, "n_max": result.n_max, "failing": result.failing, "witness": result.witness}
    if boundary_report is not None and not boundary_report.found:
        rep.values["boundary"] = report_values_no_solution(boundary_report)
    rep.exit_code = EXIT_FAILED if result.verdict is Verdict.INDETERMINATE else EXIT_OK
    return rep


def report_values_no_solution(report) -> dict:
    return {"solved": False, "leading_eigenvalue": report.leading_eigenvalue, "detail": report.detail}


def cmd_report(config: RunConfig, observables_path=None, k: int = 0) -> Report:
    rep = Report("report")
    parts = [("verify.", cmd_verify(config)), ("boundary.", cmd_boundary(config)), ("classify.", cmd_classify(config))]
    if observables_path is not None:
        parts.append(("eval.", cmd_eval(config, observables_path, k)))
    for prefix, sub in parts:
        if prefix == "classify.":
            # compatibility failures are the verdict, not a failed property
            rep.values["classify"] = sub.values
            rep.add(Check("verdict_decided", sub.code() == EXIT_OK, 0.0, detail=sub.values["verdict"]), prefix)
            continue
        rep.merge(sub, prefix)
    return rep


# ---- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qmarkov", description="Verify, evaluate and classify quantum Markov chains on finite lattices.")
    p.add_argument("command", choices=["verify", "eval", "boundary", "classify", "report"])
    p.add_argument("--config", required=True, metavar="PATH", help="JSON run configuration")
    p.add_argument("--observables", metavar="PATH", help="JSON observables file (eval, report)")
    p.add_argument("--horizon", type=int, default=0, metavar="K", help="horizon extension k for eval (default 0)")
    p.add_argument("--tol", type=float, metavar="X", help="override all tolerances")
    p.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    p.add_argument("--format", choices=["json", "csv", "md"], default="json")
    p.add_argument("--output", metavar="PATH", help="write the report here instead of stdout")
    p.add_argument("--timing", action="store_true", help="include wall time (makes output nondeterministic)")
    return p


def run(args) -> tuple[Report, int]:
    config = parse_spec(args.config).with_overrides(args.tol, args.seed)
    if args.horizon < 0:
        raise ConfigError("value", "--horizon must be nonnegative", "--horizon")
    if args.command == "verify":
        rep = cmd_verify(config)
    elif args.command == "eval":
        if not args.observables:
            raise ConfigError("io", "eval needs --observables", "--observables")
        rep = cmd_eval(config, args.observables, args.horizon)
    elif args.command == "boundary":
        rep = cmd_boundary(config)
    elif args.command == "classify":
        rep = cmd_classify(config)
    else:
        rep = cmd_report(config, args.observables, args.horizon)
    return rep, rep.code()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    t0 = time.perf_counter()
    try:
        rep, code = run(args)
    except (ConfigError, NotInSpanError, HorizonError) as exc:
        print(f"qmarkov: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except QMarkovError as exc:
        print(f"qmarkov: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except ValueError as exc:
        print(f"qmarkov: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.timing:
        rep.wall_time = time.perf_counter() - t0
    text = rep.render(args.format)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
