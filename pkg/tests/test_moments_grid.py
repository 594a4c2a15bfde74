import math

import numpy as np
import pytest

from polydiff.generator import GeneratorSpec, apply_B, build_dual
from polydiff.measure_poly import CoefficientTensor, DiscreteMeasure, FiniteSpace, GridSpace, eval_monomial, psi
from polydiff.moments_finite import moment_finite
from polydiff.moments_grid import (
    InstabilityError,
    PideConfig,
    discretize_dual_grid,
    moment_grid,
    solve_moment_pide,
    stable_dt,
)


def tapered_spec(n=41, half=4.0, b=0.0, s=0.6, t=0.4, alpha=0.5):
    space = GridSpace(-half, half, n)
    taper = 1 - (space.nodes / half) ** 2
    return GeneratorSpec.grid(space, b=b, sigma=s * taper, tau=t * taper, alpha=alpha)


def constant_vol_spec(n, half, s):
    space = GridSpace(-half, half, n)
    sig = np.full(n, s)
    sig[[0, -1]] = 0.0
    return GeneratorSpec.grid(space, sigma=sig)


def heat_solution(x, t, s, w):
    """Gaussian bump exp(-x²/(2w²)) convolved with N(0, s²t)."""
    v = w**2 + s**2 * t
    return w / np.sqrt(v) * np.exp(-x**2 / (2 * v))


def test_pide_config_validation():
    with pytest.raises(ValueError):
        PideConfig(scheme="crank")
    with pytest.raises(ValueError):
        PideConfig(safety=0.0)
    with pytest.raises(ValueError):
        PideConfig(dt=-1.0)


def test_discretize_rejects_inadmissible():
    space = GridSpace(-1.0, 1.0, 11)
    with pytest.raises(ValueError, match="tangency"):
        discretize_dual_grid(GeneratorSpec.grid(space, tau=1.0), 2)
    with pytest.raises(ValueError):
        discretize_dual_grid(GeneratorSpec.finite(alpha=1.0, d=2), 2)


def test_applier_examples():
    spec = tapered_spec(b=lambda x: -0.5 * x)
    n = spec.space.n
    for k in (1, 2, 3):
        assert np.max(np.abs(discretize_dual_grid(spec, k).apply_array(np.ones((n,) * k)))) <= 1e-12
    h = np.tanh(spec.space.nodes)
    assert np.array_equal(discretize_dual_grid(spec, 1).apply_array(h), apply_B(spec, h))
    no_tau = spec.__class__(spec.space, alpha=0.8, b=spec.b, sigma=spec.sigma, tau=0.0)
    u = np.outer(h, h)
    Bh = apply_B(no_tau, h)
    expected = np.outer(Bh, h) + np.outer(h, Bh) + 0.8 * psi(CoefficientTensor(spec.space, u)).values
    assert np.allclose(discretize_dual_grid(no_tau, 2).apply_array(u), expected, atol=1e-12)


def test_conservation_with_motion():
    spec = tapered_spec(b=lambda x: -0.5 * x)
    sol = solve_moment_pide(discretize_dual_grid(spec, 2), CoefficientTensor.constant(spec.space, 2), [0.5, 1.0])
    assert np.max(np.abs(sol.u[-1].values - 1.0)) <= 1e-10
    assert sol.diagnostics.violations == 0


def test_heat_kernel_k1():
    s, w, T = 1.0, 1.0, 1.0
    half = 6 * math.sqrt(w**2 + s**2 * T)
    spec = constant_vol_spec(101, half, s)
    x = spec.space.nodes
    g = CoefficientTensor(spec.space, np.exp(-x**2 / (2 * w**2)))
    sol = solve_moment_pide(discretize_dual_grid(spec, 1), g, T)
    interior = np.abs(x) <= half / 2
    err = np.max(np.abs(sol.u[-1].values - heat_solution(x, T, s, w))[interior])
    assert err <= 5e-3


def _interior_error(n, half=6.0, T=0.5):
    spec = constant_vol_spec(n, half, 1.0)
    x = spec.space.nodes
    g = CoefficientTensor(spec.space, np.exp(-x**2 / 2))
    u = solve_moment_pide(discretize_dual_grid(spec, 1), g, T).u[-1].values
    return x, u


def test_richardson_second_order():
    sols = [_interior_error(n) for n in (41, 81, 161)]
    # sample every solution on the coarse nodes
    coarse_x = sols[0][0]
    vals = [u[np.searchsorted(x, coarse_x - 1e-12)] for x, u in sols]
    mask = np.abs(coarse_x) <= 3.0
    e1 = np.max(np.abs(vals[0] - vals[1])[mask])
    e2 = np.max(np.abs(vals[1] - vals[2])[mask])
    assert math.log2(e1 / e2) >= 1.8


def test_degree_two_factorization():
    spec = tapered_spec(t=0.0, alpha=0.0, b=lambda x: -0.3 * x)
    x = spec.space.nodes
    h = CoefficientTensor(spec.space, np.cos(x))
    T = 0.6
    u1 = solve_moment_pide(discretize_dual_grid(spec, 1), h, T).u[-1].values
    u2 = solve_moment_pide(discretize_dual_grid(spec, 2), CoefficientTensor.power(h, 2), T).u[-1].values
    # both are the same semi-discrete flow; only time stepping differs
    assert np.max(np.abs(u2 - np.outer(u1, u1))) < 1e-6


def test_exchange_only_matches_finite():
    a0, T = 1.3, 0.8
    space = GridSpace(0.0, 1.0, 9)
    spec = GeneratorSpec.grid(space, alpha=a0)
    nodes = [2, 6]
    w = np.zeros(9)
    w[nodes] = 0.5
    g = CoefficientTensor(space, 1.0 - np.eye(9))
    grid_value = moment_grid(spec, g, DiscreteMeasure(space, w), T, PideConfig(dt=1e-3))
    finite = moment_finite(GeneratorSpec.finite(alpha=a0, d=2), CoefficientTensor(FiniteSpace(2), 1 - np.eye(2)),
                           DiscreteMeasure(FiniteSpace(2), [0.5, 0.5]), T)
    assert grid_value == pytest.approx(finite, abs=1e-9)
    assert grid_value == pytest.approx(2 * 0.5 * 0.5 * math.exp(-a0 * T), abs=1e-9)


def test_exchange_only_conservation():
    space = GridSpace(0.0, 1.0, 11)
    spec = GeneratorSpec.grid(space, alpha=lambda x, y: 1 + x * y)
    sol = solve_moment_pide(discretize_dual_grid(spec, 3), CoefficientTensor.constant(space, 3), 2.0)
    assert np.max(np.abs(sol.u[-1].values - 1.0)) <= 1e-10


def test_moment_grid_trivial_cases():
    spec = tapered_spec()
    space = spec.space
    nu = DiscreteMeasure(space, np.exp(-space.nodes**2) / np.exp(-space.nodes**2).sum())
    g = CoefficientTensor.power(CoefficientTensor(space, np.tanh(space.nodes)), 2)
    assert moment_grid(spec, g, nu, 0.0) == eval_monomial(g, nu)
    assert moment_grid(spec, CoefficientTensor.constant(space, 2), nu, 1.0) == pytest.approx(1.0, abs=1e-10)


def test_max_principle_monitor():
    spec = tapered_spec(s=0.3, t=0.4)
    x = spec.space.nodes
    g = CoefficientTensor.power(CoefficientTensor(spec.space, np.exp(-x**2)), 2)
    sol = solve_moment_pide(discretize_dual_grid(spec, 2), g, 1.0)
    u = sol.u[-1].values
    assert u.min() >= g.values.min() - 1e-6 and u.max() <= g.values.max() + 1e-6


def test_instability_detected():
    spec = tapered_spec()
    applier = discretize_dual_grid(spec, 1)
    g = CoefficientTensor(spec.space, np.cos(3 * spec.space.nodes))
    dt = 20 / applier.rate_bound()
    with pytest.raises(InstabilityError, match="CFL"):
        solve_moment_pide(applier, g, 1.0, PideConfig(dt=dt, scheme="euler"))
    loose = solve_moment_pide(applier, g, 1.0, PideConfig(dt=dt, scheme="euler", strict=False))
    assert loose.diagnostics.violations > 0


def test_auto_dt_uses_bound():
    spec = tapered_spec()
    applier = build_dual(spec, 2)
    assert stable_dt(applier, PideConfig(safety=0.25)) == pytest.approx(0.25 / applier.rate_bound())
