"""Command-line front end.

    hyperext seminorm      seminorm with a three-level convergence table
    hyperext extend        full extension run, audited, with CSV exports
    hyperext scan-spheres  sup-distance over hyperbolic spheres about a centre
    hyperext covering      covering of a hyperbolic ball and its invariants
    hyperext verify        pinned invariant suites (--suite NAME)
    hyperext report        PNG renderings of the CSV/JSON in an output directory

Exit codes: 0 pass, 1 audited-inequality failure, 2 configuration error,
3 pipeline abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .covering import build_covering
from .extension import (
    covariance_defect,
    hyperharmonic_extension,
    kernel_mass,
    explicit_distance_bound,
    uniform_ball_sample,
)
from .hyperbolic import MobiusTransform, hyperbolic_distance, random_mobius
from .pipeline import PipelineAbort, PipelineConfig, audit_estimates, extend
from .radial import annulus_energy_identity_check
from .scanner import good_sphere_density_check, radius_grid, scan_spheres
from .spheremap import SphereGrid, gagliardo_seminorm, make_target, make_test_map, w1n_energy

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
SUITES = ("mobius", "kernel", "covariance", "radial-exact", "covering")


class ConfigError(ValueError):
    """Bad configuration; carries the offending line number and key when known."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.key = key


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Flat key = value run configuration.  Every count must be positive."""

    n: int = 1
    target: str = "auto"  # circle, sphere, ellipse, or auto
    map: str = "circle-degree:k=1"
    map_grid: int = 512  # nodes on S^1, latitudes on S^2
    kernel_refine: int = 4
    iota: float = 0.9
    energy_samples: int = 1 << 14
    distribution_samples: int = 1 << 16
    singular_samples: int = 1 << 13
    scan_step: float = 0.1
    scan_radius: float = 4.0
    covering_region: float = 3.0
    covering_rho: float = 0.5
    seed: int = 0
    out: str = "out"
    mode: str = "gagliardo"

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ConfigError("n must be 1 or 2", key="n")
        if self.mode not in ("gagliardo", "w1n"):
            raise ConfigError("mode must be gagliardo or w1n", key="mode")
        for name in ("map_grid", "kernel_refine", "energy_samples", "distribution_samples", "singular_samples"):
            if getattr(self, name) <= 0:
                raise ConfigError("must be positive", key=name)
        if self.energy_samples < 10_000:
            raise ConfigError("must be at least 10000", key="energy_samples")
        for name in ("iota", "scan_step", "scan_radius", "covering_region", "covering_rho"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be positive", key=name)
        if self.seed < 0:
            raise ConfigError("must be non-negative", key="seed")
        if self.n == 2 and self.map_grid > 96:
            raise ConfigError("S^2 grids above 96 latitudes make the pairwise seminorm too large", key="map_grid")

    def to_text(self) -> str:
        lines = ["# hyperext run configuration"]
        lines += [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("expected key = value", line=lineno)
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError("unknown key", line=lineno, key=key)
            if key in values:
                raise ConfigError("duplicate key", line=lineno, key=key)
            values[key] = _convert(val, types[key], lineno, key)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        return cls.from_text(text, **overrides)

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            iota=self.iota, seed=self.seed, mode=self.mode, energy_samples=self.energy_samples,
            distribution_samples=self.distribution_samples, singular_samples=self.singular_samples,
            scan_step=self.scan_step, kernel_refine=self.kernel_refine,
        )

    def boundary_map(self, resolution: int | None = None):
        """The configured map; target "auto" keeps the map's own target."""
        grid = SphereGrid.make(self.n, self.map_grid if resolution is None else resolution)
        try:
            target = None if self.target == "auto" else make_target(self.target)
            u = make_test_map(self.map, grid, target)
        except ValueError as exc:
            raise ConfigError(str(exc), key="map") from exc
        off = float(np.max(u.target.distance_to(u.values)))
        if off > 1e-9:
            raise ConfigError(f"map {self.map!r} does not take values in target {self.target!r}", key="target")
        return u


def _convert(val: str, typ, line: int, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
    except ValueError:
        raise ConfigError(f"expected {typ}, got {val!r}", line=line, key=key) from None
    return val


# -- output helpers -----------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: numpy to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    return obj


def write_report(out: Path, report: dict, timings: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    body = dict(report)
    body["timings"] = timings
    path = out / "report.json"
    path.write_text(json.dumps(_clean(body), indent=1, sort_keys=True) + "\n")
    return path


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- commands -----------------------------------------------------------------


def cmd_seminorm(cfg: RunConfig, mobius=None) -> tuple[int, dict]:
    levels = [max(cfg.map_grid // 4, 8), max(cfg.map_grid // 2, 8), cfg.map_grid]
    rows = []
    for lvl in levels:
        u = cfg.boundary_map(lvl)
        est = gagliardo_seminorm(u)
        rows.append({"resolution": lvl, "nodes": u.grid.size, "seminorm": est.value,
                     "excluded_mass": est.excluded_mass, "w1n_energy": w1n_energy(u)})
    vals = [r["seminorm"] for r in rows]
    steps = np.abs(np.diff(vals))
    report = {
        "command": "seminorm",
        "config": asdict(cfg),
        "levels": rows,
        "seminorm": vals[-1],
        "monotone": bool(np.all(np.diff(vals) >= 0) or np.all(np.diff(vals) <= 0)),
        "contracting": bool(steps[-1] <= steps[0] + 1e-12),
    }
    if mobius is not None:
        u = cfg.boundary_map()
        pulled = u.compose_mobius(MobiusTransform.translation(mobius))
        after = gagliardo_seminorm(pulled).value
        report["mobius"] = {"a": list(mobius), "before": vals[-1], "after": after,
                            "ratio": after / vals[-1] if vals[-1] else float("nan")}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "convergence.csv",
                ["resolution", "nodes", "seminorm", "excluded_mass_fraction", "w1n_energy"],
                [[r["resolution"], r["nodes"], f"{r['seminorm']:.12e}", f"{r['excluded_mass']:.6e}",
                  f"{r['w1n_energy']:.12e}"] for r in rows])
    return EXIT_PASS, report


def cmd_extend(cfg: RunConfig) -> tuple[int, dict]:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    u = cfg.boundary_map()
    report: dict = {"command": "extend", "config": asdict(cfg)}
    try:
        result = extend(u, cfg.pipeline_config())
    except PipelineAbort as exc:
        report["abort"] = {"message": str(exc), "diagnostics": exc.diagnostics}
        return EXIT_ABORT, report
    audit = audit_estimates(result)
    invariants = {
        "manifold_valued": result.manifold_report.ok,
        "trace": result.trace_report.ok,
        "distribution_bounded": result.distribution.bounded,
        "good_set_monotone": result.good_set_monotone,
        "audit": audit.passed,
    }
    report.update(
        ledger=result.ledger.as_dict(),
        distribution={
            "lambda": result.distribution.lambdas, "value": result.distribution.values,
            "std_error": result.distribution.std_errors, "samples": result.distribution.samples,
            "quasinorm": result.distribution.quasinorm,
        },
        audit=audit.as_dict(),
        trace={"points": result.trace_report.points, "passed": result.trace_report.passed,
               "max_final_deviation": result.trace_report.max_final_deviation,
               "threshold": result.trace_report.threshold},
        manifold=asdict(result.manifold_report),
        stages=[{"q": s.q, "redirects": s.redirects, "singularities": len(s.singularities),
                 "improved": s.improved, "skipped": s.skipped, "good_fraction": s.good_fraction}
                for s in result.stages],
        invariants=invariants,
    )
    _write_rows(out / "distribution.csv", ["lambda", "lambda_pow_m_times_measure", "std_error"],
                [[f"{r['lambda']:.12e}", f"{r['value']:.12e}", f"{r['std_error']:.12e}"]
                 for r in result.distribution.to_rows()])
    if result.covering is not None:
        result.covering.to_csv(out / "covering.csv")
    if result.hull is not None:
        result.hull.scan.scan.to_csv(out / "scan.csv")
        report["scan_center"] = result.hull.scan.center
    return (EXIT_PASS if all(invariants.values()) else EXIT_FAIL), report


def cmd_scan(cfg: RunConfig, center=None) -> tuple[int, dict]:
    u = cfg.boundary_map()
    fieldh = hyperharmonic_extension(u, cfg.kernel_refine)
    a = np.zeros(cfg.n + 1) if center is None else np.asarray(center, dtype=float)
    scan = scan_spheres(fieldh, a, radius_grid(cfg.scan_radius, cfg.scan_step))
    E = gagliardo_seminorm(u).value
    violations = scan.explicit_bound_violations(E)
    report = {
        "command": "scan-spheres", "config": asdict(cfg), "center": a, "seminorm": E,
        "explicit_bound": explicit_distance_bound(E, cfg.n), "violations": violations,
    }
    if cfg.scan_radius >= 1.0 and E > 0:
        rhos = [r for r in (1.0, 2.0, 4.0, 8.0) if r <= cfg.scan_radius]
        dens = good_sphere_density_check(fieldh, E, a=a, rhos=rhos, step=cfg.scan_step)
        report["density"] = {"rhos": dens.rhos, "constants": dens.constants, "variation": dens.variation}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    scan.to_csv(out / "scan.csv")
    return (EXIT_PASS if violations == 0 else EXIT_FAIL), report


def cmd_covering(cfg: RunConfig) -> tuple[int, dict]:
    cov = build_covering(cfg.covering_region, cfg.covering_rho, seed=cfg.seed, dim=cfg.n + 1)
    checks = _covering_checks(cov, cfg.seed)
    report = {"command": "covering", "config": asdict(cfg), "centers": len(cov), "Q": cov.Q,
              "q_bound": cov.q_bound(), "checks": checks}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cov.to_csv(out / "covering.csv")
    return (EXIT_PASS if all(checks.values()) else EXIT_FAIL), report


def _covering_checks(cov, seed) -> dict:
    rho = cov.rho
    return {
        "packing": cov.packing_ok(),
        "separation": cov.separation_ok(),
        "partition": cov.partition_ok(),
        "coverage": cov.coverage_ok(seed),
        "multiplicity": sum(cov.multiplicity_violations((rho, 2 * rho, 4 * rho)).values()) == 0,
        "q_bound": cov.Q <= cov.q_bound(),
    }


# -- verification suites --------------------------------------------------------


def suite_mobius(seed: int = 0, count: int = 50) -> dict:
    rng = np.random.default_rng([seed, 1])
    iso = fd = diff = 0.0
    for dim in (2, 3):
        for _ in range(count):
            T = random_mobius(rng, dim, 0.9)
            x, y = uniform_ball_sample(rng, 2, dim, 0.95)
            d0 = hyperbolic_distance(x, y)
            iso = max(iso, abs(hyperbolic_distance(T(x), T(y)) - d0) / max(1.0, d0))
            h = 1e-6
            cols = [(T(x + h * e) - T(x - h * e)) / (2 * h) for e in np.eye(dim)]
            sv = np.linalg.svd(np.stack(cols, axis=1), compute_uv=False)
            lam = T.conformal_factor(x)
            fd = max(fd, float(np.max(np.abs(sv - lam)) / lam))
            lhs = np.sum((T(x) - T(y)) ** 2)
            rhs = T.conformal_factor(x) * T.conformal_factor(y) * np.sum((x - y) ** 2)
            diff = max(diff, abs(lhs - rhs) / rhs)
    return {
        "isometry": {"error": iso, "tolerance": 1e-10, "passed": iso < 1e-10},
        "conformal_factor": {"error": fd, "tolerance": 1e-6, "passed": fd < 1e-6},
        "difference_identity": {"error": diff, "tolerance": 1e-10, "passed": diff < 1e-10},
    }


def suite_kernel(seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, 2])
    grid = SphereGrid.circle(2048)
    x = uniform_ball_sample(rng, 100, 2, 0.99)
    err = float(np.max(np.abs(kernel_mass(x, grid) - 1.0)))
    u = make_test_map("constant:c=0.6,0.8", SphereGrid.circle(256))
    f = hyperharmonic_extension(u)
    const = float(np.max(np.abs(f.evaluate(x) - np.array([0.6, 0.8]))))
    return {
        "mass": {"error": err, "tolerance": 1e-6, "passed": err < 1e-6},
        "constant_map": {"error": const, "tolerance": 1e-12, "passed": const < 1e-12},
    }


def suite_covariance(seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, 3])
    sample = uniform_ball_sample(rng, 200, 2, 0.9)
    defects = []
    for lvl in (128, 256, 512):
        f = hyperharmonic_extension(make_test_map("circle-degree:k=2", SphereGrid.circle(lvl)))
        trng = np.random.default_rng([seed, 4])
        defects.append(max(covariance_defect(f, random_mobius(trng, 2, 0.5), sample) for _ in range(5)))
    ref = defects[-1]
    return {
        "reference_defect": {"error": ref, "tolerance": 1e-4, "passed": ref < 1e-4},
        "refinement": {"defects": defects, "passed": bool(defects[0] >= defects[1] >= defects[2])},
    }


def suite_radial_exact(seed: int = 0) -> dict:
    out = {}
    for desc in ("circle-degree:k=1", "circle-degree:k=2", "bubble:k=1:a=0.5,0"):
        f = hyperharmonic_extension(make_test_map(desc, SphereGrid.circle(512)))
        for rho, delta in ((1.0, 0.25), (0.5, 0.1)):
            rep = annulus_energy_identity_check(f, np.array([0.1, -0.2]), rho, delta)
            out[f"{desc} rho*={rho} delta={delta}"] = {"ratio": rep.lhs / rep.rhs, "passed": rep.passed}
    return out


def suite_covering(seed: int = 0) -> dict:
    out = {}
    for region, rho in ((3.0, 0.5), (4.0, 1.0)):
        checks = _covering_checks(build_covering(region, rho, seed=seed, dim=2), seed)
        out[f"region={region} rho={rho}"] = {"checks": checks, "passed": all(checks.values())}
    return out


SUITE_FUNCS = {
    "mobius": suite_mobius,
    "kernel": suite_kernel,
    "covariance": suite_covariance,
    "radial-exact": suite_radial_exact,
    "covering": suite_covering,
}


def cmd_verify(suite: str, seed: int = 0) -> tuple[int, dict]:
    names = SUITES if suite == "all" else (suite,)
    results = {}
    for name in names:
        results[name] = SUITE_FUNCS[name](seed)
    passed = {name: all(v["passed"] for v in res.values()) for name, res in results.items()}
    return (EXIT_PASS if all(passed.values()) else EXIT_FAIL), {
        "command": "verify", "suite": suite, "seed": seed, "results": results, "passed": passed,
    }


# -- plots ------------------------------------------------------------------------


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float) if len(rows) > 1 else np.zeros((0, len(rows[0])))


def cmd_report(out: Path) -> tuple[int, dict]:
    """Render PNGs from the CSV files already in `out`; the data files stay authoritative."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    made = []
    if (out / "distribution.csv").exists():
        _, d = _read_csv(out / "distribution.csv")
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.errorbar(d[:, 0], d[:, 1], yerr=d[:, 2], fmt="o-", ms=3)
        ax.set(xscale="log", xlabel="lambda", ylabel="lambda^m |{|DU| > lambda}|")
        made.append(_save(fig, out / "distribution.png"))
    if (out / "scan.csv").exists():
        _, d = _read_csv(out / "scan.csv")
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(d[:, 0], d[:, 1], label="sup distance")
        ax.plot(d[:, 0], d[:, 2], "--", label="certified bound")
        ax.set(xlabel="hyperbolic radius", ylabel="distance to u(S^n)")
        ax.legend()
        made.append(_save(fig, out / "scan.png"))
    if (out / "convergence.csv").exists():
        _, d = _read_csv(out / "convergence.csv")
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(d[:, 1], d[:, 2], "o-")
        ax.set(xscale="log", xlabel="grid nodes", ylabel="seminorm")
        made.append(_save(fig, out / "convergence.png"))
    if (out / "covering.csv").exists():
        head, d = _read_csv(out / "covering.csv")
        if head[:2] == ["x0", "x1"] and "x2" not in head:
            fig, ax = plt.subplots(figsize=(4.5, 4.5))
            ax.add_patch(plt.Circle((0, 0), 1.0, fill=False, lw=0.8))
            ax.scatter(d[:, 0], d[:, 1], c=d[:, -1], s=4, cmap="tab20")
            ax.set(aspect="equal", xlim=(-1.05, 1.05), ylim=(-1.05, 1.05))
            made.append(_save(fig, out / "covering.png"))
    return EXIT_PASS, {"command": "report", "images": [p.name for p in made]}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    import matplotlib.pyplot as plt

    plt.close(fig)
    return path


# -- entry point -------------------------------------------------------------------


def _vector(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if len(vals) not in (2, 3):
        raise argparse.ArgumentTypeError("expected 2 or 3 components")
    return vals


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hyperext", description="Hyperbolic extension of sphere maps.")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=str)
    common.add_argument("--mode", choices=("gagliardo", "w1n"))
    common.add_argument("--map", dest="map_desc", help="map descriptor, e.g. bubble:k=1:a=0.9,0")
    common.add_argument("--iota", type=float)
    p = sub.add_parser("seminorm", parents=[common], help="seminorm and convergence table")
    p.add_argument("--mobius", type=_vector, help="also report the seminorm of u o T_a")
    sub.add_parser("extend", parents=[common], help="full audited extension run")
    p = sub.add_parser("scan-spheres", parents=[common], help="radius scan of sphere sups")
    p.add_argument("--mobius", type=_vector, help="scan about this centre instead of the origin")
    sub.add_parser("covering", parents=[common], help="covering invariants")
    p = sub.add_parser("verify", help="invariant suites")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str)
    p = sub.add_parser("report", help="render PNGs from an output directory")
    p.add_argument("--out", type=str, default="out")
    return ap


def _config_from(args) -> RunConfig:
    flags = {"seed": args.seed, "out": args.out, "mode": args.mode, "map": args.map_desc, "iota": args.iota}
    if args.config is not None:
        return RunConfig.load(args.config, **flags)
    return RunConfig(**{k: v for k, v in flags.items() if v is not None})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        if args.command == "verify":
            code, report = cmd_verify(args.suite, args.seed)
            out = Path(args.out) if args.out else None
        elif args.command == "report":
            code, report = cmd_report(Path(args.out))
            out = None
        else:
            cfg = _config_from(args)
            out = Path(cfg.out)
            if args.command == "seminorm":
                code, report = cmd_seminorm(cfg, args.mobius)
            elif args.command == "extend":
                code, report = cmd_extend(cfg)
            elif args.command == "scan-spheres":
                code, report = cmd_scan(cfg, args.mobius)
            else:
                code, report = cmd_covering(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    timings = {"total_seconds": time.perf_counter() - t0}
    if out is not None:
        path = write_report(out, report, timings)
        print(f"wrote {path}")
    summary = {k: report[k] for k in ("invariants", "passed", "checks", "abort") if k in report}
    print(json.dumps(_clean(summary), sort_keys=True))
    print("PASS" if code == EXIT_PASS else f"FAIL (exit {code})")
    return code


if __name__ == "__main__":
    sys.exit(main())
