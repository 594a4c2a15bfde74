"""Command line entry point: ``polydiff <task> --config FILE | --preset NAME``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import (
    PRESETS,
    TASKS,
    ConfigError,
    ExperimentConfig,
    cost_summary,
    load_config,
    preset,
    quick_overrides,
)
from .generator import MemoryGuardError, build_dual, validate_spec
from .moments_finite import solve_moments
from .moments_grid import InstabilityError, discretize_dual_grid, solve_moment_pide
from .montecarlo import Estimate
from .simulate import empirical_u_moments, weight_moments, simulate_common_noise, simulate_moran, simulate_simplex_sde
from .validate import (
    check_kkt,
    check_pmp,
    crosscheck_moments,
    find_simplex_maximizer,
    random_polynomial,
    PMP_TOL,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _write_csv(path: Path, header: list[str], rows) -> None:
    # repr keeps full precision so reruns compare byte for byte
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# tasks; each returns (passed, summary fragment)


def run_moments(cfg: ExperimentConfig, out: Path) -> tuple[bool, str]:
    spec, g, nu = cfg.generator, cfg.g, cfg.nu
    if spec.is_grid:
        sol = solve_moment_pide(discretize_dual_grid(spec, cfg.k), g, cfg.times, cfg.pide)
        diag = sol.diagnostics
        _write_json(out / "pide_diagnostics.json", vars(diag))
        if cfg.k <= 2:
            x = spec.space.nodes
            for t, u in zip(cfg.times, sol.u):
                if cfg.k == 1:
                    _write_csv(out / f"u_T{t:g}.csv", ["x", "u"], zip(x, u.values))
                else:
                    X, Y = np.meshgrid(x, x, indexing="ij")
                    _write_csv(out / f"u_T{t:g}.csv", ["x", "y", "u"],
                               zip(X.ravel(), Y.ravel(), u.values.ravel()))
        note = f"dt={diag.dt:.3g} steps={diag.steps} max-principle violations={diag.violations}"
    else:
        sol = solve_moments(build_dual(spec, cfg.k), g, cfg.times)
        for t, u in zip(cfg.times, sol.u):
            u.save(out / f"u_T{t:g}")
        note = "uniformization"
    values = sol.moments(nu)
    _write_csv(out / "moments.csv", ["T", "k", "value"], [(t, cfg.k, v) for t, v in zip(cfg.times, values)])
    return True, f"{note}; E<g,X_T^k> at T={cfg.times[-1]:g}: {values[-1]:.10g}"


def _finite_simulate(cfg: ExperimentConfig, out: Path) -> tuple[bool, str]:
    spec, g, nu = cfg.generator, cfg.g, cfg.nu
    exact = solve_moments(build_dual(spec, cfg.k), g, cfg.times).moments(nu)
    T = cfg.times[-1]
    sde = simulate_simplex_sde(spec, nu.weights, T, cfg.dt, cfg.seed, n_paths=cfg.paths, save_times=cfg.times)
    moran = simulate_moran(spec, nu, cfg.particles, T, cfg.seed + 1, n_reps=cfg.reps, save_times=cfg.times)
    long_rows, wide_rows = [], []
    for t, ex in zip(cfg.times, exact):
        i = int(np.searchsorted(sde.times, t - 1e-12))
        vals = weight_moments(sde.weights[i], g)
        s = Estimate.from_samples(vals)
        m = Estimate.from_samples(moran.moments(g, int(np.searchsorted(moran.times, t - 1e-12))))
        long_rows += [(t, "exact", ex, 0.0), (t, "sde", s.mean, s.stderr), (t, "moran", m.mean, m.stderr)]
        wide_rows.append((t, ex, s.mean, s.stderr, m.mean, m.stderr))
    _write_csv(out / "simulate.csv", ["time", "statistic", "mean", "stderr"], long_rows)
    _write_csv(out / "comparison.csv", ["T", "exact", "sde_mean", "sde_se", "moran_mean", "moran_se"], wide_rows)
    last = wide_rows[-1]
    return True, f"T={T:g}: exact {last[1]:.6g}, SDE {last[2]:.6g}±{last[3]:.2g}, Moran {last[4]:.6g}±{last[5]:.2g}"


def _grid_simulate(cfg: ExperimentConfig, out: Path) -> tuple[bool, str]:
    spec, g, nu = cfg.generator, cfg.g, cfg.nu
    sol = solve_moment_pide(discretize_dual_grid(spec, cfg.k), g, cfg.times, cfg.pide)
    T = cfg.times[-1]
    if np.any(spec.alpha) or cfg.x0 is None:
        path = simulate_moran(spec, nu, cfg.particles, T, cfg.seed, n_reps=cfg.reps, save_times=cfg.times, dt=cfg.dt)
        start = path.positions[0, :1]
        stat = (lambda pos, u: empirical_u_moments(spec.space, pos, u)) if cfg.k <= 2 else None
        label = "moran"
    else:
        path = simulate_common_noise(spec, cfg.x0, cfg.particles, T, cfg.dt, cfg.seed, n_reps=cfg.reps,
                                     save_times=cfg.times)
        start, stat, label = path.positions[0, :1], None, "common-noise"
    rows = []
    for t, u in zip(cfg.times, sol.u):
        j = int(np.searchsorted(path.times, t - 1e-12))
        if stat is None:
            engine = float(path.moments(u, 0)[0])
            est = Estimate.from_samples(path.moments(g, j))
        else:
            engine = float(stat(start, u)[0])
            est = Estimate.from_samples(stat(path.positions[j], g))
        rows += [(t, "engine", engine, 0.0), (t, label, est.mean, est.stderr)]
    _write_csv(out / "simulate.csv", ["time", "statistic", "mean", "stderr"], rows)
    return True, f"T={T:g}: engine {rows[-2][2]:.6g}, {label} {rows[-1][2]:.6g}±{rows[-1][3]:.2g}"


def run_simulate(cfg: ExperimentConfig, out: Path) -> tuple[bool, str]:
    return (_grid_simulate if cfg.generator.is_grid else _finite_simulate)(cfg, out)


def run_validate(cfg: ExperimentConfig, out: Path) -> tuple[bool, str]:
    report = validate_spec(cfg.generator)
    _write_json(out / "spec_validation.json", {"ok": report.ok, "violations": report.violations})
    results = []
    for i, sc in enumerate(cfg.scenarios or ["heterozygosity"]):
        rep = crosscheck_moments(sc, seed=cfg.seed + 1000 * i)
        results.append(rep)
        _write_json(out / f"crosscheck_{i:02d}_{rep.scenario}.json", rep.to_dict())
    passed = report.ok and all(r.passed for r in results)
    worst = max((abs(row.z) for r in results for row in r.rows), default=0.0)
    return passed, f"{sum(r.passed for r in results)}/{len(results)} scenarios pass, worst |z|={worst:.2f}"


def run_kkt(cfg: ExperimentConfig, out: Path) -> tuple[bool, str]:
    # on a grid the search runs over node weights, i.e. the simplex of dimension n
    spec = cfg.generator
    admissible = validate_spec(spec).ok
    n = int(cfg.kkt.get("polynomials", 20))
    max_deg = int(cfg.kkt.get("max_degree", 3))
    restarts = int(cfg.kkt.get("restarts", 10))
    rng = np.random.default_rng(cfg.seed)
    records, worst_lp, kkt_ok = [], -np.inf, True
    for i in range(n):
        p = random_polynomial(spec.space, int(rng.integers(1, max_deg + 1)), rng)
        nu = find_simplex_maximizer(p, restarts=restarts, rng_seed=cfg.seed + i)
        rep = check_kkt(p, nu, spec)
        lp = check_pmp(spec, p, nu)
        worst_lp = max(worst_lp, lp)
        kkt_ok &= rep.passed
        records.append(rep.to_dict())
    _write_json(out / "kkt.json", {"admissible": admissible, "pmp_tol": PMP_TOL, "worst_Lp": worst_lp,
                                   "reports": records})
    passed = kkt_ok and (worst_lp <= PMP_TOL or not admissible)
    return passed, f"{n} polynomials, KKT {'ok' if kkt_ok else 'FAILED'}, max Lp(nu*)={worst_lp:.3g}"


RUNNERS = {"moments": run_moments, "simulate": run_simulate, "validate": run_validate, "kkt": run_kkt}


def run_config(cfg: ExperimentConfig, out: str | Path) -> int:
    """Execute one configured task, write its artifacts into ``out`` and return the exit status."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    passed, note = RUNNERS[cfg.task](cfg, out)
    status = "ok" if passed else "FAILED"
    print(f"[{cfg.name}] {cfg.task} {status}: {cost_summary(cfg)}; {note}")
    return EXIT_OK if passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="polydiff", description="Moments of measure-valued polynomial diffusions.")
    ap.add_argument("task", choices=[*TASKS, "presets"])
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="JSON experiment document")
    src.add_argument("--preset", choices=sorted(PRESETS))
    ap.add_argument("--seed", type=int, help="64-bit master seed (overrides the config)")
    ap.add_argument("--quick", action="store_true", help="reduced Monte Carlo budgets")
    ap.add_argument("--out", type=Path, default=Path("polydiff-out"))
    ap.add_argument("--paths", type=int)
    ap.add_argument("--particles", type=int)
    ap.add_argument("--dt", type=float)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.task == "presets":
        for name in sorted(PRESETS):
            print(name)
        return EXIT_OK
    try:
        if args.config is not None:
            cfg = load_config(args.config, task=args.task)
        elif args.preset is not None:
            cfg = preset(args.preset, task=args.task)
        else:
            print("polydiff: one of --config or --preset is required", file=sys.stderr)
            return EXIT_USAGE
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be a 64-bit unsigned integer")
            cfg.seed = args.seed
        for key in ("paths", "particles", "dt"):
            if getattr(args, key) is not None:
                setattr(cfg, key, getattr(args, key))
        if args.quick:
            cfg = quick_overrides(cfg)
    except ConfigError as exc:
        print(f"polydiff: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MemoryGuardError as exc:
        print(f"polydiff: memory guard: {exc}", file=sys.stderr)
        return EXIT_FAIL
    try:
        return run_config(cfg, args.out)
    except ConfigError as exc:
        print(f"polydiff: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MemoryGuardError, InstabilityError) as exc:
        print(f"polydiff: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
