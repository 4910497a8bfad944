"""Experiment runner.

    minmove run <config> [--out DIR] [--seed S] [--threads K]
    minmove verify <run-dir>
    minmove lemmas [--q 0.5 1 2] [--out DIR]

Exit status: 0 pass, 1 usage or parse error, 2 invalid (shrinking) domain,
3 nonconverged steps, 4 a check failed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .algebra import LEMMA_IDS, check_lemma_inequalities, derive_all, write_constants_csv
from .checks import Check
from .exact import ExactSolution, exact_field, relative_error_norms, support_hull_family
from .geometry import (DomainFamily, SpatialMask, check_nondecreasing, cylinder, expanding_ball,
                       inner_parallel_set, read_family_csv)
from .grid import Field, Lattice, Trajectory, read_field_csv, write_field_csv
from .integrand import IntegrandSpec
from .minimizer import SolverSettings
from .mollify import (check_finite_integration_by_parts, check_mollifier_bound,
                      check_mollifier_convexity, landes_mollify)
from .scheme import (SchemeConfig, ShrinkingDomainError, check_boundary_conformance,
                     check_dissipation_bound, check_energy_estimates, check_monotonicity, run)
from .verify import (ComparisonMap, check_continuity_chain, default_basis, dual_norm_estimate,
                     initial_condition_check, parabolic_minimizer_residual, step_tolerances,
                     variational_residual)

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN, EXIT_NONCONVERGED, EXIT_CHECK = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.split(","))


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.split(","))


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (parser, default); a default of ... marks a required key
SCHEMA: dict[str, tuple] = {
    "scheme.ell": (int, ...),
    "scheme.T": (float, ...),
    "scheme.q": (float, 1.0),
    "domain.kind": (str, "cylinder"),
    "domain.lo": (_floats, (0.0, 0.0)),
    "domain.hi": (_floats, (1.0, 1.0)),
    "domain.nodes": (_ints, (33, 33)),
    "domain.center": (_floats, None),
    "domain.radius0": (float, 0.25),
    "domain.radius_rate": (float, 0.0),
    "domain.family_csv": (str, None),
    "integrand.kind": (str, "p_dirichlet"),
    "integrand.p": (float, 2.0),
    "integrand.lambda": (float, 0.0),
    "integrand.a": (float, 1.0),
    "integrand.eps_reg": (float, None),
    "initial.kind": (str, "exact"),
    "initial.csv": (str, None),
    "boundary.kind": (str, "zero"),
    "boundary.csv": (str, None),
    "components": (int, 1),
    "solver.tol_obj": (float, 1e-10),
    "solver.tol_step": (float, 1e-9),
    "solver.max_iters": (int, 20_000),
    "exact.kind": (str, None),
    "exact.q": (float, None),
    "exact.p": (float, 2.0),
    "exact.t0": (float, 0.1),
    "exact.C": (float, 1.0),
    "exact.margin": (float, 0.1),
    "verify.competitors": (int, 100),
    "verify.energy": (_bool, True),
    "verify.dissipation": (_bool, True),
    "verify.dissipation_eps": (float, 0.25),
    "verify.variational": (_bool, True),
    "verify.parabolic": (_bool, True),
    "verify.mollifier": (_bool, True),
    "verify.initial": (_bool, True),
    "verify.landes_h": (float, 0.25),
    "output.every_k": (int, None),
    "run.seed": (int, 0),
    "run.allow_flagged": (_bool, False),
}


@dataclass
class ExperimentConfig:
    values: dict
    source: Optional[str] = None
    out: Optional[Path] = None

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def echo(self) -> dict:
        out = {}
        for k in sorted(self.values):
            v = self.values[k]
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    def to_text(self) -> str:
        lines = []
        for k in sorted(self.values):
            v = self.values[k]
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    seen: dict[str, int] = {}
    vals: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        parser = SCHEMA[key][0]
        try:
            vals[key] = parser(val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    for key, (_, default) in SCHEMA.items():
        if key not in vals:
            if default is ...:
                raise ConfigError(f"{source}: missing {key}")
            vals[key] = default
    if vals["scheme.ell"] < 1 or vals["scheme.T"] <= 0 or vals["scheme.q"] <= 0:
        raise ConfigError(f"{source}: scheme.ell >= 1, scheme.T > 0 and scheme.q > 0 required")
    return ExperimentConfig(vals, source)


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


# ---------------------------------------------------------------------------
# building the problem


@dataclass
class Problem:
    lattice: Lattice
    family: DomainFamily
    spec: IntegrandSpec
    u_o: Field
    u_star: Field
    exact: Optional[ExactSolution]


def _exact(cfg: ExperimentConfig) -> Optional[ExactSolution]:
    kind = cfg["exact.kind"]
    if kind is None:
        return None
    q = cfg["scheme.q"] if cfg["exact.q"] is None else cfg["exact.q"]
    n = len(cfg["domain.nodes"])
    t0 = 0.0 if kind == "heat_separable" else cfg["exact.t0"]
    center = cfg["domain.center"]
    return ExactSolution(kind, q=q, p=cfg["exact.p"], n=n, t0=t0, C=cfg["exact.C"],
                         center=center, components=cfg["components"])


def build_problem(cfg: ExperimentConfig) -> Problem:
    nodes = cfg["domain.nodes"]
    lat = Lattice.box(cfg["domain.lo"], cfg["domain.hi"], nodes)
    ell, T = cfg["scheme.ell"], cfg["scheme.T"]
    times = np.arange(ell + 1) * (T / ell)
    times[-1] = T
    sol = _exact(cfg)
    kind = cfg["domain.kind"]
    center = cfg["domain.center"] or tuple(0.5 * (a + b) for a, b in zip(cfg["domain.lo"], cfg["domain.hi"]))
    if kind == "cylinder":
        fam = cylinder(SpatialMask.full(lat), T)
    elif kind == "ball":
        r0, rate = cfg["domain.radius0"], cfg["domain.radius_rate"]
        fam = expanding_ball(lat, center, lambda t: r0 + rate * t, times)
    elif kind == "support_hull":
        if sol is None:
            raise ConfigError("domain.kind = support_hull needs exact.kind")
        fam = support_hull_family(sol, cfg["exact.margin"], times, lat)
    elif kind == "csv":
        if not cfg["domain.family_csv"]:
            raise ConfigError("domain.kind = csv needs domain.family_csv")
        fam = read_family_csv(cfg["domain.family_csv"], lat)
    else:
        raise ConfigError(f"unknown domain.kind {kind!r}")
    ikind = cfg["integrand.kind"]
    a = cfg["integrand.a"]
    spec = IntegrandSpec(ikind, cfg["integrand.p"], cfg["integrand.lambda"],
                         np.full(lat.dims, a) if ikind == "coefficient_p_dirichlet" else a,
                         eps_reg=cfg["integrand.eps_reg"])
    N = cfg["components"]
    if cfg["boundary.kind"] == "zero":
        u_star = Field.zeros(lat, N)
    elif cfg["boundary.kind"] == "csv":
        u_star = read_field_csv(cfg["boundary.csv"], lat)
    else:
        raise ConfigError(f"unknown boundary.kind {cfg['boundary.kind']!r}")
    ik = cfg["initial.kind"]
    if ik == "exact":
        if sol is None:
            raise ConfigError("initial.kind = exact needs exact.kind")
        u_o = exact_field(sol, lat, sol.t0)
    elif ik == "zero":
        u_o = Field.zeros(lat, N)
    elif ik == "csv":
        u_o = read_field_csv(cfg["initial.csv"], lat)
    else:
        raise ConfigError(f"unknown initial.kind {ik!r}")
    return Problem(lat, fam, spec, u_o, u_star, sol)


# ---------------------------------------------------------------------------
# outputs


def _vtk_text(f: Field) -> str:
    lat = f.lattice
    dims = list(lat.dims) + [1] * (3 - lat.n)
    org = list(lat.origin) + [0.0] * (3 - lat.n)
    sp = list(lat.spacing) + [1.0] * (3 - lat.n)
    # VTK points run x fastest; our arrays are row-major with x1 first, so transpose
    vals = np.transpose(f.values, tuple(reversed(range(lat.n))) + (lat.n,)).reshape(-1, f.components)
    out = ["# vtk DataFile Version 3.0", "minmove field", "ASCII", "DATASET STRUCTURED_POINTS",
           "DIMENSIONS " + " ".join(str(d) for d in dims),
           "ORIGIN " + " ".join(repr(float(o)) for o in org),
           "SPACING " + " ".join(repr(float(s)) for s in sp),
           f"POINT_DATA {lat.num_nodes}"]
    for c in range(f.components):
        out += [f"SCALARS u{c + 1} double 1", "LOOKUP_TABLE default"]
        out += [repr(float(v)) for v in vals[:, c]]
    return "\n".join(out) + "\n"


def export_fields(traj: Trajectory, directory, every_k: int) -> list[Path]:
    """``slice_<i>.csv`` and ``slice_<i>.vtk`` for ``i = 0, k, 2k, ...`` and always ``ell``."""
    if every_k < 1:
        raise ValueError("every_k must be >= 1")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    idx = sorted(set(range(0, traj.ell + 1, every_k)) | {traj.ell})
    files = []
    for i in idx:
        f = traj.step(i)
        p = d / f"slice_{i}.csv"
        write_field_csv(f, p)
        v = d / f"slice_{i}.vtk"
        v.write_text(_vtk_text(f))
        files += [p, v]
    return files


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    import scipy
    return {"minmove": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": ".".join(str(x) for x in sys.version_info[:3])}


@dataclass
class RunManifest:
    config: dict
    versions: dict
    checks: dict
    files: dict
    status: int
    messages: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(_jsonable({"config": self.config, "versions": self.versions, "checks": self.checks,
                           "files": self.files, "status": self.status, "messages": self.messages}),
                          indent=2, sort_keys=True) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def run_checks(cfg: ExperimentConfig, prob: Problem, traj: Trajectory, tol: np.ndarray,
               ledger=None) -> tuple[list[Check], dict]:
    """Every enabled check; returns pass/fail checks and recorded (unasserted) quantities."""
    checks: list[Check] = []
    info: dict = {}
    spec, T, h = prob.spec, traj.T, traj.h
    if ledger is not None:
        margins = ledger.step_margin[1:]
        checks.append(Check("step_minimality", 0.0, float(margins.min()) if len(margins) else 0.0))
        if cfg["verify.energy"]:
            checks += check_energy_estimates(traj, ledger)
            checks.append(check_monotonicity(ledger))
        if cfg["verify.dissipation"]:
            eps = cfg["verify.dissipation_eps"] * T
            if traj.ell > 4 * T / eps:
                checks.append(check_dissipation_bound(traj, ledger, eps))
            else:
                info["dissipation"] = "skipped: needs ell > 4T/eps"
    checks.append(check_boundary_conformance(traj, prob.u_star))
    lam = cfg["verify.landes_h"] * T
    if cfg["verify.variational"]:
        maps = [ComparisonMap.stationary(traj, prob.u_star)]
        try:
            maps.append(ComparisonMap.mollified_initial(traj, prob.u_star, 2 * max(prob.lattice.spacing)))
        except ValueError as exc:
            info["mollified_initial"] = f"skipped: {exc}"
        maps.append(ComparisonMap.landes(traj, lam))
        for v in maps:
            cs = [variational_residual(traj, v, m * h, spec, tol) for m in range(1, traj.ell + 1)]
            checks.append(min(cs, key=lambda c: c.margin + c.slack))
    if cfg["verify.parabolic"] and traj.ell >= 2:
        try:
            basis = default_basis(traj)
        except ValueError as exc:
            info["parabolic"] = f"skipped: {exc}"
        else:
            cs = [parabolic_minimizer_residual(traj, ph, spec, tol) for phi in basis for ph in (phi, -phi)]
            worst = min(cs, key=lambda c: c.margin + c.slack)
            worst.detail["test_function"] = worst.name
            worst.name = "parabolic_minimality"
            checks.append(worst)
            d = dual_norm_estimate(traj, basis, spec)
            info["dual_norm"] = {"lower_bound": d.lower_bound, "rhs_bound": d.rhs_bound, "ratio": d.ratio}
    if cfg["verify.mollifier"]:
        u0 = traj.step(0)
        for r in (1.0, 2.0, math.inf):
            c = check_mollifier_bound(traj, lam, u0, r)
            c.name = f"mollifier_bound[r={r:g}]"
            checks.append(c)
        checks.append(check_mollifier_convexity(traj, lam, spec, u0))
        ibp = check_finite_integration_by_parts(traj, landes_mollify(traj, lam, u0), 1)
        checks.append(Check("integration_by_parts", ibp.lhs, ibp.rhs, 64 * np.finfo(float).eps * ibp.scale))
        info["ibp_deltas"] = {"delta1": ibp.delta1, "delta2": ibp.delta2}
    checks.append(check_continuity_chain(traj))
    if cfg["verify.initial"] and traj.ell >= 16:
        mask0 = traj.family.slices[0]
        K = inner_parallel_set(mask0, 4 * max(prob.lattice.spacing))
        if not K.empty:
            rep = initial_condition_check(traj, traj.step(0), K, [T / 4, T / 8, T / 16])
            info["initial_condition"] = rep.values
            checks.append(Check("initial_condition_decreasing", 0.0, 1.0 if rep.strictly_decreasing else -1.0))
    if prob.exact is not None:
        st, sup = relative_error_norms(traj, prob.exact)
        info["exact_relative_error"] = {"space_time": st, "sup_in_time": sup}
    return checks, info


def _write_outputs(out: Path, cfg: ExperimentConfig, traj: Trajectory, ledger, checks, info,
                   status: int, messages: list) -> RunManifest:
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    (out / "config.txt").write_text(cfg.to_text())
    files.append(out / "config.txt")
    every = cfg["output.every_k"] or traj.ell
    files += export_fields(traj, out / "fields", every)
    np.save(out / "trajectory.npy", traj.values)
    files.append(out / "trajectory.npy")
    if ledger is not None:
        ledger.write_csv(out / "ledger.csv")
        files.append(out / "ledger.csv")
    report = {"checks": {c.name: c.to_dict() for c in checks}, "recorded": info}
    (out / "report.json").write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
    files.append(out / "report.json")
    inv = {str(p.relative_to(out)): _sha256(p) for p in files}
    man = RunManifest(_jsonable(cfg.echo()), _versions(), {c.name: c.passed for c in checks}, inv,
                      status, messages)
    (out / "manifest.json").write_text(man.to_json())
    return man


def run_experiment(cfg: ExperimentConfig, out=None, seed: Optional[int] = None,
                   log=print) -> RunManifest:
    """Run the scheme and all enabled checks, writing outputs to ``out``."""
    out = Path(out or cfg.out or "minmove-out")
    if seed is not None:
        cfg.values["run.seed"] = seed
    prob = build_problem(cfg)
    if not check_nondecreasing(prob.family):
        raise ShrinkingDomainError("the domain family shrinks in time; slices must be nondecreasing "
                                   "(E^s contained in E^t for s <= t)")
    settings = SolverSettings(cfg["solver.tol_obj"], cfg["solver.tol_step"], cfg["solver.max_iters"])
    sc = SchemeConfig(cfg["scheme.ell"], cfg["scheme.T"], cfg["scheme.q"], prob.family, prob.spec,
                      prob.u_o, prob.u_star, settings, cfg["verify.competitors"], cfg["run.seed"])
    t0 = time.perf_counter()
    traj, ledger = run(sc)
    t_run = time.perf_counter() - t0
    checks, info = run_checks(cfg, prob, traj, ledger.achieved_tol, ledger)
    t_check = time.perf_counter() - t0 - t_run
    messages = []
    status = EXIT_OK
    if not ledger.all_converged:
        bad = [int(i) for i in np.flatnonzero(~ledger.converged)]
        messages.append(f"nonconverged steps: {bad}")
        if not cfg["run.allow_flagged"]:
            status = EXIT_NONCONVERGED
    failed = [c.name for c in checks if not c.passed]
    if failed:
        messages.append("failed checks: " + ", ".join(failed))
        if status == EXIT_OK:
            status = EXIT_CHECK
    for c in checks:
        log(c.line())
    man = _write_outputs(out, cfg, traj, ledger, checks, info, status, messages)
    # wall-clock lives outside the manifest so that manifests are reproducible
    (out / "timing.json").write_text(json.dumps({"scheme_seconds": t_run, "checks_seconds": t_check},
                                                indent=2) + "\n")
    return man


def verify_run_dir(run_dir, log=print) -> int:
    d = Path(run_dir)
    cfg = parse_config(d / "config.txt")
    prob = build_problem(cfg)
    vals = np.load(d / "trajectory.npy")
    ell, T = cfg["scheme.ell"], cfg["scheme.T"]
    traj = Trajectory(vals, prob.lattice, T / ell, q=cfg["scheme.q"], p=prob.spec.p, family=prob.family)
    tol = step_tolerances(traj, prob.spec, prob.u_star)
    checks, info = run_checks(cfg, prob, traj, tol, None)
    for c in checks:
        log(c.line())
    (d / "verify_report.json").write_text(json.dumps(_jsonable(
        {"checks": {c.name: c.to_dict() for c in checks}, "recorded": info}), indent=2, sort_keys=True) + "\n")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_CHECK


def lemma_suite(qs, out=None, log=print, fresh: int = 100_000) -> int:
    ok = True
    consts = []
    for q in qs:
        for N in (1, 3):
            cs = derive_all(q, 10_000, 0, N)
            consts += cs
            for key, r in check_lemma_inequalities(cs, fresh, 1, N).items():
                ok &= r.passed
                log(f"{'PASS' if r.passed else 'FAIL'} {key} N={N}: worst ratio {r.worst_ratio:.6g}, "
                    f"violations {r.violations}/{r.samples}")
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_constants_csv(consts, Path(out) / "lemma_constants.csv")
    return EXIT_OK if ok else EXIT_CHECK


def _limit_threads(k: Optional[int]):
    if k is None:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(k)


def main(argv=None) -> int:
    # global options are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS)
    ap = argparse.ArgumentParser(prog="minmove", description="Minimizing-movements runner.",
                                 parents=[common])
    sub = ap.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", parents=[common])
    p_run.add_argument("config")
    p_ver = sub.add_parser("verify", parents=[common])
    p_ver.add_argument("run_dir")
    p_lem = sub.add_parser("lemmas", parents=[common])
    p_lem.add_argument("--q", type=float, nargs="+", default=[0.3, 0.5, 1.0, 2.0, 5.0])
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    for name in ("seed", "threads", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    limiter = _limit_threads(args.threads)
    try:
        if args.cmd == "run":
            cfg = parse_config(args.config)
            man = run_experiment(cfg, args.out, args.seed)
            for m in man.messages:
                print(m, file=sys.stderr)
            return man.status
        if args.cmd == "verify":
            return verify_run_dir(args.run_dir)
        return lemma_suite(args.q, args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ShrinkingDomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
