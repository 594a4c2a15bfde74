"""Optimality conditions on the simplex, positive maximum principle checks and
the engine-versus-simulator harness."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from .generator import GeneratorSpec, apply_generator, build_dual
from .measure_poly import (
    CoefficientTensor,
    DiscreteMeasure,
    FiniteSpace,
    GridSpace,
    MeasurePolynomial,
    derivative_tensor,
    eval_monomial,
    psi,
    signed_measure,
)
from .moments_finite import propagate, simulate_dual_chain
from .moments_grid import PideConfig, discretize_dual_grid, solve_moment_pide
from .montecarlo import Estimate
from .simulate import empirical_u_moments, simulate_common_noise, simulate_moran, simulate_simplex_sde

SUPPORT_TOL = 1e-7
KKT_TOL = 1e-6
PMP_TOL = 1e-8
Z_LIMIT = 3.0


# ---------------------------------------------------------------------------
# maximizers


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{z >= 0, Σz = 1}`` (sort-and-threshold)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = ind[u - css / ind > 0][-1]
    return np.maximum(v - css[rho - 1] / rho, 0.0)


class _Objective:
    def __init__(self, p: MeasurePolynomial):
        self.p = p
        self.space = p.space

    def value(self, z):
        return self.p(signed_measure(self.space, z))

    def grad(self, z):
        return derivative_tensor(self.p, signed_measure(self.space, z), 1)

    def hess(self, z):
        return derivative_tensor(self.p, signed_measure(self.space, z), 2)


def _ascent(obj: _Objective, z: np.ndarray, max_iter: int, xtol: float) -> np.ndarray:
    """Projected gradient ascent with Armijo backtracking."""
    f = obj.value(z)
    step = 1.0
    for _ in range(max_iter):
        g = obj.grad(z)
        while True:
            cand = project_simplex(z + step * g)
            fc = obj.value(cand)
            if fc >= f + 1e-4 * g @ (cand - z) or step < 1e-14:
                break
            step *= 0.5
        moved = np.max(np.abs(cand - z))
        if fc >= f:
            z, f = cand, fc
        step = min(step * 2.0, 1e6)
        if moved < xtol:
            break
    return z


def _polish(obj: _Objective, z: np.ndarray, sweeps: int = 8) -> np.ndarray:
    """Newton iterations on the KKT system of the current face."""
    for _ in range(sweeps):
        S = np.flatnonzero(z > 0)
        g, H = obj.grad(z), obj.hess(z)
        lam = g[S].mean()
        m = S.size
        K = np.zeros((m + 1, m + 1))
        K[:m, :m] = H[np.ix_(S, S)]
        K[:m, m] = -1.0
        K[m, :m] = 1.0
        rhs = np.concatenate([-(g[S] - lam), [1.0 - z[S].sum()]])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            return z
        cand = z.copy()
        cand[S] += sol[:m]
        if np.any(cand < 0):
            return z
        res_old = np.ptp(g[S])
        res_new = np.ptp(obj.grad(cand)[S])
        if obj.value(cand) < obj.value(z) - 1e-13 or res_new >= res_old:
            return z
        z = cand
    return z


def find_simplex_maximizer(p: MeasurePolynomial, restarts: int = 10, rng_seed: int = 0,
                           max_iter: int = 5000, xtol: float = 1e-14) -> DiscreteMeasure:
    """Best local maximizer of ``p`` over probability measures from Dirichlet starts.

    Grid spaces are treated as the simplex of node weights.
    """
    obj = _Objective(p)
    rng = np.random.default_rng(rng_seed)
    n = p.space.size
    best, best_val = None, -math.inf
    for _ in range(max(restarts, 1)):
        z = _ascent(obj, rng.dirichlet(np.ones(n)), max_iter, xtol)
        z = _polish(obj, z)
        val = obj.value(z)
        if val > best_val:
            best, best_val = z, val
    return DiscreteMeasure(p.space, best / best.sum())


# ---------------------------------------------------------------------------
# optimality and maximum principle


@dataclass
class KktReport:
    maximizer: DiscreteMeasure
    support: np.ndarray
    first_order_residual: float
    second_order_worst: float
    directional_worst: float
    generator_value: float | None = None
    tol: float = KKT_TOL

    @property
    def passed(self) -> bool:
        return self.first_order_residual < self.tol and self.second_order_worst < self.tol

    def to_dict(self) -> dict:
        return {
            "maximizer": self.maximizer.weights.tolist(),
            "support": self.support.tolist(),
            "first_order_residual": self.first_order_residual,
            "second_order_worst": self.second_order_worst,
            "directional_worst": self.directional_worst,
            "generator_value": self.generator_value,
            "passed": self.passed,
        }


def check_kkt(p: MeasurePolynomial, nu_star: DiscreteMeasure, spec: GeneratorSpec | None = None,
              support_tol: float = SUPPORT_TOL, tol: float = KKT_TOL, n_directions: int = 100,
              rng_seed: int = 0) -> KktReport:
    """First- and second-order necessary conditions at a candidate maximizer.

    First order: ``∂_x p`` equals ``max_E ∂p`` on the support.  Second order:
    ``Ψ(∂²p) <= 0`` on support pairs, and ``<∂²p, μ²> <= 0`` for random
    centered signed ``μ`` on the support (reported, not used for pass/fail).
    """
    grad = derivative_tensor(p, nu_star, 1)
    hess = derivative_tensor(p, nu_star, 2)
    support = np.flatnonzero(nu_star.weights > support_tol)
    first = float(np.max(np.abs(grad[support] - grad.max()), initial=0.0))
    ps = psi(CoefficientTensor(p.space, hess)).values
    second = float(np.max(ps[np.ix_(support, support)], initial=-math.inf)) if support.size else 0.0
    second = max(second, 0.0) if support.size == 1 else second
    worst_dir = -math.inf
    if support.size > 1:
        rng = np.random.default_rng(rng_seed)
        H = hess[np.ix_(support, support)]
        for _ in range(n_directions):
            mu = rng.standard_normal(support.size)
            mu -= mu.mean()
            mu /= np.abs(mu).sum()
            worst_dir = max(worst_dir, float(mu @ H @ mu))
    else:
        worst_dir = 0.0
    gen = None if spec is None else apply_generator(spec, p, nu_star)
    return KktReport(nu_star, support, first, second, worst_dir, gen, tol)


def check_pmp(spec: GeneratorSpec, p: MeasurePolynomial, nu_star: DiscreteMeasure) -> float:
    """``Lp(ν*)``; nonpositive at maximizers for admissible generators."""
    return apply_generator(spec, p, nu_star)


# ---------------------------------------------------------------------------
# random objects for property experiments


def random_polynomial(space, degree: int, rng: np.random.Generator, scale: float = 1.0) -> MeasurePolynomial:
    from .measure_poly import symmetrize

    n = space.size
    terms = [CoefficientTensor(space, scale * symmetrize(rng.standard_normal((n,) * k))) for k in range(degree + 1)]
    return MeasurePolynomial.from_terms(terms, space)


def random_finite_spec(d: int, rng: np.random.Generator, mutation: bool = True) -> GeneratorSpec:
    a = rng.random((d, d)) * 2.0
    kernel = rng.random((d, d)) if mutation else None
    return GeneratorSpec.finite(kernel, a + a.T, d=d)


# ---------------------------------------------------------------------------
# cross-check harness


@dataclass
class CrossCheckRow:
    statistic: str
    engine: float
    oracle_mean: float
    oracle_se: float
    z: float
    bias_allowance: float = 0.0


@dataclass
class CrossCheckReport:
    scenario: str
    rows: list[CrossCheckRow] = field(default_factory=list)
    params: dict = field(default_factory=dict)
    z_limit: float = Z_LIMIT

    @property
    def passed(self) -> bool:
        return all(abs(r.z) <= self.z_limit for r in self.rows)

    def add(self, statistic: str, engine: float, est: Estimate, bias_allowance: float = 0.0) -> None:
        self.rows.append(CrossCheckRow(statistic, float(engine), est.mean, est.stderr,
                                       est.zscore(engine, bias_allowance), bias_allowance))

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "params": self.params, "passed": self.passed,
                "z_limit": self.z_limit, "rows": [asdict(r) for r in self.rows]}


def heterozygosity_tensor() -> CoefficientTensor:
    return CoefficientTensor(FiniteSpace(2), 1.0 - np.eye(2))


def _scenario_heterozygosity(params: Mapping, seed: int) -> CrossCheckReport:
    z, a0, T = params.get("z", 0.3), params.get("a0", 1.0), params.get("T", 1.0)
    paths, dt = params.get("paths", 10_000), params.get("dt", 1e-3)
    N, reps = params.get("particles", 200), params.get("reps", 200)
    spec = GeneratorSpec.finite(alpha=a0, d=2)
    g = heterozygosity_tensor()
    nu = DiscreteMeasure(FiniteSpace(2), [z, 1 - z])
    exact = eval_monomial(propagate(build_dual(spec, 2), g, T), nu)
    report = CrossCheckReport("heterozygosity", params=dict(z=z, a0=a0, T=T, paths=paths, dt=dt, particles=N, reps=reps))
    sde = simulate_simplex_sde(spec, nu.weights, T, dt, seed, n_paths=paths)
    # Euler bias of E[H] is about H_T a0² T dt / 2; allow twice that
    report.add("sde", exact, Estimate.from_samples(2 * sde.final[:, 0] * sde.final[:, 1]),
               bias_allowance=exact * a0**2 * T * dt)
    moran = simulate_moran(spec, nu, N, T, seed + 1, n_reps=reps)
    # the engine is re-evaluated at the realized initial empirical measure
    z_emp = float(np.mean(moran.positions[0, 0] == 0))
    exact_moran = 2 * z_emp * (1 - z_emp) * math.exp(-a0 * T)
    report.add("moran", exact_moran, Estimate.from_samples(moran.moments(g)))
    return report


def _scenario_tower(params: Mapping, seed: int) -> CrossCheckReport:
    z, a0, T = params.get("z", 0.3), params.get("a0", 1.0), params.get("T", 1.0)
    paths, dt = params.get("paths", 10_000), params.get("dt", 1e-3)
    mutation = params.get("mutation", 0.0)
    kernel = mutation * (1 - np.eye(2))
    spec = GeneratorSpec.finite(kernel, a0, d=2)
    g = heterozygosity_tensor()
    nu = DiscreteMeasure(FiniteSpace(2), [z, 1 - z])
    dual = build_dual(spec, 2)
    t = T / 2
    u_rest = propagate(dual, g, T - t)
    u_full = propagate(dual, u_rest, t)
    target = eval_monomial(u_full, nu)
    path = simulate_simplex_sde(spec, nu.weights, t, dt, seed, n_paths=paths)
    w = path.final
    conditional = np.einsum("pi,ij,pj->p", w, u_rest.values, w)
    report = CrossCheckReport("tower", params=dict(z=z, a0=a0, T=T, t=t, paths=paths, dt=dt, mutation=mutation))
    rate = a0 + 2 * mutation
    report.add("E<u(T-t),X_t^2>", target, Estimate.from_samples(conditional),
               bias_allowance=abs(target) * rate**2 * t * dt)
    return report


def _common_noise_spec(n: int, half_width: float, tau: float, sigma: float = 0.0) -> GeneratorSpec:
    space = GridSpace(-half_width, half_width, n)
    t = np.full(n, tau)
    s = np.full(n, sigma)
    t[[0, -1]] = s[[0, -1]] = 0.0
    return GeneratorSpec.grid(space, tau=t, sigma=s)


def _scenario_common_noise(params: Mapping, seed: int) -> CrossCheckReport:
    tau, x0, T = params.get("tau", 1.0), params.get("x0", 0.0), params.get("T", 1.0)
    n, width = params.get("n", 101), params.get("half_width", 6.0)
    N, reps, dt = params.get("particles", 500), params.get("reps", 200), params.get("dt", 1e-2)
    spec = _common_noise_spec(n, width, tau)
    space = spec.space
    h = CoefficientTensor(space, np.exp(-space.nodes**2 / 2))
    g = CoefficientTensor.power(h, 2)
    sol = solve_moment_pide(discretize_dual_grid(spec, 2), g, T, PideConfig())
    i = int(np.argmin(np.abs(space.nodes - x0)))
    engine = float(sol.u[-1].values[i, i])
    path = simulate_common_noise(spec, space.nodes[i], N, T, dt, seed, n_reps=reps)
    report = CrossCheckReport("common-noise", params=dict(tau=tau, x0=float(space.nodes[i]), T=T, n=n,
                                                          particles=N, reps=reps, dt=dt))
    report.add("<h⊗h, X_T^2>", engine, Estimate.from_samples(path.moments(g)))
    return report


def _scenario_dual_chain(params: Mapping, seed: int) -> CrossCheckReport:
    d, k, T = params.get("d", 3), params.get("k", 2), params.get("T", 0.7)
    paths = params.get("paths", 4000)
    rng = np.random.default_rng(params.get("spec_seed", 11))
    spec = random_finite_spec(d, rng)
    g = random_polynomial(FiniteSpace(d), k, rng).terms[k]
    dual = build_dual(spec, k)
    x0 = tuple(range(k))
    u = propagate(dual, g, T)
    report = CrossCheckReport("dual-chain", params=dict(d=d, k=k, T=T, paths=paths))
    report.add("u(T,x0)", u.values[x0], simulate_dual_chain(dual, x0, T, paths, seed, g))
    return report


def _default_grid_spec() -> GeneratorSpec:
    space = GridSpace(-4.0, 4.0, 81)
    taper = lambda x: 1 - (x / 4.0) ** 2  # noqa: E731
    return GeneratorSpec.grid(space, b=lambda x: -0.5 * x, sigma=lambda x: 0.6 * taper(x),
                              tau=lambda x: 0.4 * taper(x), alpha=0.5)


def _scenario_feynman_kac(params: Mapping, seed: int) -> CrossCheckReport:
    """k = 1: grid engine against single-particle Euler paths (α plays no role)."""
    spec = params.get("spec") or _default_grid_spec()
    space = spec.space
    h = params.get("h")
    h = CoefficientTensor(space, np.tanh(space.nodes)) if h is None else h
    T, paths, dt = params.get("T", 1.0), params.get("paths", 10_000), params.get("dt", 1e-3)
    x0 = params.get("x0", float(space.nodes[space.n // 2 + space.n // 8]))
    i = int(np.argmin(np.abs(space.nodes - x0)))
    sol = solve_moment_pide(discretize_dual_grid(spec, 1), h, T, params.get("pide", PideConfig()))
    engine = float(sol.u[-1].values[i])
    path = simulate_common_noise(spec.with_alpha(0.0), space.nodes[i], 1, T, dt, seed, n_reps=paths)
    report = CrossCheckReport("feynman-kac", params=dict(x0=float(space.nodes[i]), T=T, paths=paths, dt=dt, n=space.n))
    report.add("E[h(Z_T)]", engine, Estimate.from_samples(path.moments(h)))
    return report


def _scenario_grid_moran(params: Mapping, seed: int) -> CrossCheckReport:
    """k = 2 with resampling and common noise against the grid Moran system.

    Both sides use the U-statistic over distinct particle pairs: its
    expectation under the particle dynamics is exactly the U-statistic of
    ``u(T)`` at the initial configuration, so no 1/N allowance is needed.
    """
    spec = params.get("spec") or _default_grid_spec()
    space = spec.space
    g = params.get("g")
    if g is None:
        g = CoefficientTensor.power(CoefficientTensor(space, np.tanh(space.nodes)), 2)
    T, dt = params.get("T", 0.5), params.get("dt", 5e-3)
    N, reps = params.get("particles", 100), params.get("reps", 200)
    nu = params.get("nu")
    if nu is None:
        w = np.exp(-space.nodes**2 / 2)
        nu = DiscreteMeasure(space, w / w.sum())
    sol = solve_moment_pide(discretize_dual_grid(spec, 2), g, T, params.get("pide", PideConfig()))
    path = simulate_moran(spec, nu, N, T, seed, n_reps=reps, dt=dt)
    engine = float(empirical_u_moments(space, path.positions[0, :1], sol.u[-1])[0])
    report = CrossCheckReport("grid-moran", params=dict(T=T, dt=dt, particles=N, reps=reps, n=space.n))
    report.add("U-stat <g, X_T^2>", engine, Estimate.from_samples(empirical_u_moments(space, path.positions[-1], g)))
    return report


SCENARIOS: dict[str, Callable[[Mapping, int], CrossCheckReport]] = {
    "heterozygosity": _scenario_heterozygosity,
    "tower": _scenario_tower,
    "common-noise": _scenario_common_noise,
    "dual-chain": _scenario_dual_chain,
    "feynman-kac": _scenario_feynman_kac,
    "grid-moran": _scenario_grid_moran,
}


def crosscheck_moments(scenario, seed: int = 20240601) -> CrossCheckReport:
    """Run a named engine-versus-oracle scenario.

    ``scenario`` is a scenario id or a mapping ``{"id": ..., **params}``.
    """
    if isinstance(scenario, str):
        name, params = scenario, {}
    else:
        params = dict(scenario)
        name = params.pop("id")
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; available: {', '.join(sorted(SCENARIOS))}")
    return SCENARIOS[name](params, seed)
