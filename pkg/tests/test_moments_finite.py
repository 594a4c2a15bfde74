import math

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp
from hypothesis import given, strategies as st

from conftest import random_simplex, random_symmetric
from polydiff.generator import GeneratorSpec, RateMatrixDual, build_dual
from polydiff.measure_poly import CoefficientTensor, DiscreteMeasure, FiniteSpace, eval_monomial, sym_tensor
from polydiff.moments_finite import (
    GeneratorError,
    check_rate_matrix,
    moment_curve,
    moment_finite,
    propagate,
    simulate_dual_chain,
    solve_moments,
)
from polydiff.validate import heterozygosity_tensor, random_finite_spec


def expm_oracle(dual, g, t):
    """Dense Padé scaling-and-squaring reference."""
    return (scipy.linalg.expm(t * dual.matrix.toarray()) @ g.values.ravel()).reshape(g.values.shape)


def hand_heterozygosity(z, a0, T):
    # states (0,1),(1,0) decay at rate a0 into absorbing diagonal states where g = 0
    return 2 * z * (1 - z) * math.exp(-a0 * T)


def test_zero_time_and_zero_generator(rng):
    spec = random_finite_spec(3, rng)
    g = CoefficientTensor(FiniteSpace(3), random_symmetric(rng, 3, 2))
    assert propagate(build_dual(spec, 2), g, 0.0) is g
    still = build_dual(GeneratorSpec.finite(alpha=0.0, d=3), 2)
    assert np.array_equal(propagate(still, g, 5.0).values, g.values)


@pytest.mark.parametrize("d,k,t", [(2, 1, 0.3), (2, 2, 1.7), (3, 1, 4.0), (3, 2, 0.9), (3, 2, 12.0)])
def test_propagate_matches_expm(rng, d, k, t):
    spec = random_finite_spec(d, rng)
    g = CoefficientTensor(FiniteSpace(d), random_symmetric(rng, d, k))
    dual = build_dual(spec, k)
    assert np.allclose(propagate(dual, g, t).values, expm_oracle(dual, g, t), atol=1e-10, rtol=0)


def test_non_generator_rejected():
    bad = RateMatrixDual(FiniteSpace(2), 1, sp.csr_matrix(np.array([[-1.0, 2.0], [0.0, 0.0]])))
    with pytest.raises(GeneratorError):
        propagate(bad, CoefficientTensor(FiniteSpace(2), [1.0, 0.0]), 1.0)
    with pytest.raises(GeneratorError):
        check_rate_matrix(np.array([[1.0, -1.0], [0.0, 0.0]]))


@pytest.mark.parametrize("z", [0.3, 0.5])
@pytest.mark.parametrize("a0", [0.5, 2.0])
@pytest.mark.parametrize("T", [0.25, 1.0])
def test_heterozygosity_decay(z, a0, T):
    spec = GeneratorSpec.finite(alpha=a0, d=2)
    nu = DiscreteMeasure(FiniteSpace(2), [z, 1 - z])
    assert moment_finite(spec, heterozygosity_tensor(), nu, T) == pytest.approx(hand_heterozygosity(z, a0, T), abs=1e-10)


def test_moment_finite_trivial_cases(rng):
    s = FiniteSpace(3)
    spec = random_finite_spec(3, rng)
    nu = DiscreteMeasure(s, random_simplex(rng, 3))
    assert moment_finite(spec, CoefficientTensor.constant(s, 3), nu, 2.0) == pytest.approx(1.0, abs=1e-10)
    g = CoefficientTensor(s, random_symmetric(rng, 3, 2))
    assert moment_finite(spec, g, nu, 0.0) == eval_monomial(g, nu)


@given(st.integers(0, 10_000), st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_semigroup(seed, s_, t_):
    rng = np.random.default_rng(seed)
    spec = random_finite_spec(3, rng)
    g = CoefficientTensor(FiniteSpace(3), random_symmetric(rng, 3, 2))
    dual = build_dual(spec, 2)
    two = propagate(dual, propagate(dual, g, s_), t_)
    assert np.allclose(two.values, propagate(dual, g, s_ + t_).values, atol=1e-9)


@given(st.integers(0, 10_000), st.floats(0.0, 10.0))
def test_positivity_contraction_conservation(seed, t):
    rng = np.random.default_rng(seed)
    spec = random_finite_spec(3, rng)
    s = FiniteSpace(3)
    dual = build_dual(spec, 2)
    g = CoefficientTensor(s, np.abs(random_symmetric(rng, 3, 2)))
    u = propagate(dual, g, t).values
    assert u.min() >= -1e-12
    assert np.abs(u).max() <= np.abs(g.values).max() + 1e-12
    assert np.max(np.abs(propagate(dual, CoefficientTensor.constant(s, 2), t).values - 1.0)) <= 1e-10


@given(st.integers(0, 10_000))
def test_homogenization_coherence_across_degrees(seed):
    rng = np.random.default_rng(seed)
    s = FiniteSpace(3)
    spec = random_finite_spec(3, rng)
    h = CoefficientTensor(s, rng.standard_normal(3))
    nu = DiscreteMeasure(s, random_simplex(rng, 3))
    lifted = sym_tensor(h, CoefficientTensor.constant(s, 1))
    assert moment_finite(spec, lifted, nu, 0.8) == pytest.approx(moment_finite(spec, h, nu, 0.8), abs=1e-10)


def test_solve_moments_snapshots(rng):
    spec = random_finite_spec(2, rng)
    s = FiniteSpace(2)
    g = CoefficientTensor(s, random_symmetric(rng, 2, 2))
    sol = solve_moments(build_dual(spec, 2), g, [0.0, 0.5, 2.0])
    assert np.array_equal(sol.u[0].values, g.values)
    nu = DiscreteMeasure(s, [0.4, 0.6])
    direct = [moment_finite(spec, g, nu, t) for t in (0.0, 0.5, 2.0)]
    assert np.allclose(sol.moments(nu), direct, atol=1e-10)
    assert np.allclose(moment_curve(spec, g, nu, [0.0, 0.5, 2.0]), direct, atol=1e-10)
    with pytest.raises(ValueError):
        solve_moments(build_dual(spec, 2), g, [1.0, 0.5])


# --- dual chain Monte Carlo -------------------------------------------------------


def test_dual_chain_zero_generator():
    dual = build_dual(GeneratorSpec.finite(alpha=0.0, d=3), 2)
    g = CoefficientTensor(FiniteSpace(3), random_symmetric(np.random.default_rng(0), 3, 2))
    est = simulate_dual_chain(dual, (1, 2), 3.0, 500, 7, g)
    assert est.mean == g.values[1, 2] and est.stderr == 0.0


def test_dual_chain_heterozygosity():
    a0, T = 1.0, 0.7
    dual = build_dual(GeneratorSpec.finite(alpha=a0, d=2), 2)
    est = simulate_dual_chain(dual, (0, 1), T, 10_000, 11, heterozygosity_tensor())
    assert abs(est.mean - math.exp(-a0 * T)) <= 3 * est.stderr


def test_dual_chain_k1_occupation(rng):
    spec = random_finite_spec(3, rng)
    dual = build_dual(spec, 1)
    T = 0.9
    for target in range(3):
        indicator = CoefficientTensor(FiniteSpace(3), np.eye(3)[target])
        exact = propagate(dual, indicator, T).values[0]
        est = simulate_dual_chain(dual, (0,), T, 8000, 100 + target, indicator)
        assert abs(est.mean - exact) <= 3 * est.stderr


def test_dual_chain_deterministic():
    dual = build_dual(GeneratorSpec.finite(np.ones((3, 3)), alpha=1.0), 2)
    g = CoefficientTensor(FiniteSpace(3), np.eye(3))
    a = simulate_dual_chain(dual, (0, 1), 1.0, 3000, 5, g)
    b = simulate_dual_chain(dual, (0, 1), 1.0, 3000, 5, g)
    assert a == b
