import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_simplex, random_symmetric
from polydiff.generator import (
    GeneratorSpec,
    MemoryGuardError,
    RateMatrixDual,
    apply_B,
    apply_generator,
    apply_Q,
    build_dual,
    carre_du_champ,
    spec_from_dict,
    spec_to_dict,
    validate_spec,
)
from polydiff.measure_poly import (
    CoefficientTensor,
    DiscreteMeasure,
    FiniteSpace,
    GridSpace,
    MeasurePolynomial,
    eval_monomial,
    psi,
)
from polydiff.validate import random_finite_spec, random_polynomial


def brute_dual_matrix(spec, k):
    """L_k built entry by entry from the particle description, independent of build_dual."""
    d = spec.space.d
    states = list(itertools.product(range(d), repeat=k))
    index = {s: i for i, s in enumerate(states)}
    L = np.zeros((len(states), len(states)))
    for s in states:
        r = index[s]
        for slot in range(k):
            for v in range(d):
                if v != s[slot]:
                    t = list(s)
                    t[slot] = v
                    L[r, index[tuple(t)]] += spec.kernel[s[slot], v]
        for i, j in itertools.permutations(range(k), 2):
            # ordered pair: slot j copies slot i, with rate α/2
            if s[i] != s[j]:
                t = list(s)
                t[j] = s[i]
                L[r, index[tuple(t)]] += 0.5 * spec.alpha[s[i], s[j]]
        L[r, r] = -L[r].sum()
    return L


# --- validate_spec ------------------------------------------------------------------


def test_validate_spec_examples():
    assert validate_spec(GeneratorSpec.finite(alpha=1.0, d=3)).ok
    assert validate_spec(GeneratorSpec.finite(np.ones((3, 3)), alpha=2.0)).ok
    bad = GeneratorSpec.finite(alpha=np.array([[0, 1.0, 0], [2.0, 0, 0], [0, 0, 0]]))
    assert "α not symmetric" in validate_spec(bad).violations
    neg = GeneratorSpec.finite(alpha=np.array([[0, -1.0], [-1.0, 0]]))
    assert any("negative" in v for v in validate_spec(neg).violations)
    space = GridSpace(-1.0, 1.0, 11)
    tau = np.ones(11)
    tau[0] = 0.0
    report = validate_spec(GeneratorSpec.grid(space, tau=tau))
    assert any(v.startswith("boundary tangency") for v in report.violations)
    tau[-1] = 0.0
    assert validate_spec(GeneratorSpec.grid(space, tau=tau)).ok


def test_alpha_and_kernel_diagonals_zeroed():
    spec = GeneratorSpec.finite(np.ones((2, 2)), alpha=np.ones((2, 2)))
    assert spec.alpha[0, 0] == 0.0 and spec.kernel[1, 1] == 0.0


def test_spec_json_roundtrip(tmp_path):
    space = GridSpace(-2.0, 2.0, 9)
    x = space.nodes
    spec = GeneratorSpec.grid(space, b=-x, sigma=1 - (x / 2) ** 2, tau=0.5 * (1 - (x / 2) ** 2), alpha=0.3)
    back = spec_from_dict(json.loads(json.dumps(spec_to_dict(spec))))
    for name in ("alpha", "b", "sigma", "tau"):
        assert np.array_equal(getattr(back, name), getattr(spec, name))
    np.savetxt(tmp_path / "b.csv", -x, delimiter=",")
    doc = {"space": space.to_dict(), "mutation": {"drift_diffusion": {"b": {"csv": "b.csv"}}}, "alpha": {"constant": 1}}
    assert np.allclose(spec_from_dict(doc, tmp_path).b, -x)
    with pytest.raises(ValueError):
        spec_from_dict({"space": {"type": "finite", "d": 2}, "tau": [0, 0]})


# --- apply_B ---------------------------------------------------------------------


def test_apply_B_examples():
    lam, mu = 0.7, 1.9
    spec = GeneratorSpec.finite(np.array([[0, lam], [mu, 0]]))
    assert np.allclose(apply_B(spec, [1.0, 0.0]), [-lam, mu])
    assert np.array_equal(apply_B(spec, [3.0, 3.0]), [0.0, 0.0])
    space = GridSpace(-1.0, 1.0, 21)
    x = space.nodes
    grid = GeneratorSpec.grid(space, b=0.1, sigma=1 - x**2, tau=0.3 * (1 - x**2))
    assert np.max(np.abs(apply_B(grid, np.full(21, 2.5)))) <= 1e-12
    assert np.allclose(apply_B(grid, x)[1:-1], 0.1, atol=1e-12)


def test_apply_B_grid_against_derivatives():
    space = GridSpace(-3.0, 3.0, 601)
    x = space.nodes
    spec = GeneratorSpec.grid(space, b=np.sin(x), sigma=1 - (x / 3) ** 2)
    h = np.exp(-x**2)
    exact = np.sin(x) * (-2 * x * h) + 0.5 * (1 - (x / 3) ** 2) ** 2 * (4 * x**2 - 2) * h
    interior = slice(5, -5)
    # upwinding makes the drift term first order
    assert np.max(np.abs(apply_B(spec, h) - exact)[interior]) < 2 * space.h


# --- apply_Q ----------------------------------------------------------------------


def test_apply_Q_examples():
    s = FiniteSpace(2)
    spec = GeneratorSpec.finite(alpha=np.array([[0, 2.0], [2.0, 0]]))
    G = CoefficientTensor.power(CoefficientTensor(s, [1.0, 0.0]), 2)
    assert apply_Q(spec, G).values[0, 1] == pytest.approx(1.0)
    const = CoefficientTensor.power(CoefficientTensor(s, [4.0, 4.0]), 2)
    assert apply_Q(spec, const).is_zero()
    space = GridSpace(-1.0, 1.0, 11)
    tau = np.ones(11)
    grid = GeneratorSpec.grid(space, tau=tau)
    out = apply_Q(grid, CoefficientTensor.power(CoefficientTensor(space, space.nodes), 2)).values
    assert np.allclose(out[1:-1, 1:-1], 1.0, atol=1e-12)


def test_apply_Q_uses_analytic_slot_derivative():
    space = GridSpace(-1.0, 1.0, 7)
    x = space.nodes
    spec = GeneratorSpec.grid(space, tau=1 - x**2)
    h = np.sin(3 * x)
    G = CoefficientTensor(space, np.outer(h, h), slot_derivative=np.outer(3 * np.cos(3 * x), h))
    coarse = apply_Q(spec, CoefficientTensor(space, np.outer(h, h))).values
    assert not np.allclose(apply_Q(spec, G).values, coarse)


# --- apply_generator / carre du champ ------------------------------------------------


def test_apply_generator_examples(rng):
    s = FiniteSpace(3)
    spec = random_finite_spec(3, rng)
    nu = DiscreteMeasure(s, random_simplex(rng, 3))
    assert apply_generator(spec, MeasurePolynomial.constant(s, 1.0), nu) == 0.0
    driftless = GeneratorSpec.finite(alpha=spec.alpha)
    lin = MeasurePolynomial.monomial(CoefficientTensor(s, rng.standard_normal(3)))
    assert apply_generator(driftless, lin, nu) == pytest.approx(0.0, abs=1e-14)
    s2 = FiniteSpace(2)
    fv = GeneratorSpec.finite(alpha=2.0, d=2)
    p = MeasurePolynomial.monomial(CoefficientTensor.power(CoefficientTensor(s2, [1.0, 0.0]), 2))
    assert apply_generator(fv, p, DiscreteMeasure(s2, [0.5, 0.5])) == pytest.approx(0.5)


def test_carre_du_champ_examples(rng):
    s = FiniteSpace(3)
    spec = random_finite_spec(3, rng)
    h = CoefficientTensor(s, rng.standard_normal(3))
    lin = MeasurePolynomial.monomial(h)
    one = MeasurePolynomial.constant(s, 1.0)
    for w in random_simplex(rng, 3, 10):
        nu = DiscreteMeasure(s, w)
        assert carre_du_champ(spec, one, lin, nu) == pytest.approx(0.0, abs=1e-12)
        closed = eval_monomial(apply_Q(spec, CoefficientTensor.power(h, 2)), nu)
        assert carre_du_champ(spec, lin, lin, nu) == pytest.approx(closed, abs=1e-11)


@given(st.integers(0, 10_000))
def test_carre_du_champ_nonnegative_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 5))
    s = FiniteSpace(d)
    spec = random_finite_spec(d, rng)
    p, q = random_polynomial(s, 2, rng), random_polynomial(s, 2, rng)
    nu = DiscreteMeasure(s, random_simplex(rng, d))
    assert carre_du_champ(spec, p, p, nu) >= -1e-10
    assert carre_du_champ(spec, p, q, nu) == pytest.approx(carre_du_champ(spec, q, p, nu), abs=1e-10)


@given(st.integers(0, 10_000))
def test_carre_du_champ_leibniz(seed):
    rng = np.random.default_rng(seed)
    s = FiniteSpace(3)
    spec = random_finite_spec(3, rng)
    p, q, r = (random_polynomial(s, 1, rng) for _ in range(3))
    nu = DiscreteMeasure(s, random_simplex(rng, 3))
    lhs = carre_du_champ(spec, p * q, r, nu)
    rhs = p(nu) * carre_du_champ(spec, q, r, nu) + q(nu) * carre_du_champ(spec, p, r, nu)
    assert lhs == pytest.approx(rhs, abs=1e-10)


# --- build_dual ---------------------------------------------------------------------


def test_dual_k1_is_B(rng):
    spec = random_finite_spec(4, rng)
    L1 = build_dual(spec, 1).matrix.toarray()
    for i in range(4):
        assert np.allclose(L1 @ np.eye(4)[i], apply_B(spec, np.eye(4)[i]))


def test_dual_hand_rates():
    spec = GeneratorSpec.finite(alpha=2.0, d=2)
    L = build_dual(spec, 2).matrix.toarray()
    # state (0,1) has index 1; (0,0) is 0 and (1,1) is 3
    assert L[1, 0] == pytest.approx(1.0) and L[1, 3] == pytest.approx(1.0) and L[1, 1] == pytest.approx(-2.0)
    assert np.allclose(L[0], 0.0) and np.allclose(L[3], 0.0)


@pytest.mark.parametrize("d,k", [(2, 1), (2, 3), (3, 2), (3, 3), (4, 2)])
def test_dual_matches_brute_force(rng, d, k):
    spec = random_finite_spec(d, rng)
    assert np.allclose(build_dual(spec, k).matrix.toarray(), brute_dual_matrix(spec, k), atol=1e-14)


@given(st.integers(0, 10_000), st.integers(2, 4), st.integers(1, 3))
def test_rate_matrix_structure(seed, d, k):
    spec = random_finite_spec(d, np.random.default_rng(seed))
    L = build_dual(spec, k).matrix.toarray()
    assert np.max(np.abs(L.sum(axis=1))) <= 1e-10
    off = L - np.diag(np.diag(L))
    assert off.min() >= 0.0


@given(st.integers(0, 10_000), st.integers(2, 4), st.integers(1, 3))
def test_duality_identity_finite(seed, d, k):
    rng = np.random.default_rng(seed)
    s = FiniteSpace(d)
    spec = random_finite_spec(d, rng)
    g = CoefficientTensor(s, random_symmetric(rng, d, k))
    Lg = CoefficientTensor(s, build_dual(spec, k).apply_array(g.values))
    p = MeasurePolynomial.monomial(g)
    for w in random_simplex(rng, d, 10):
        nu = DiscreteMeasure(s, w)
        assert apply_generator(spec, p, nu) == pytest.approx(eval_monomial(Lg, nu), abs=1e-10)


def test_degree_preservation(rng):
    """L p is a polynomial of degree <= deg p: fit by least squares and check the residual."""
    d, k = 3, 2
    s = FiniteSpace(d)
    spec = random_finite_spec(d, rng)
    p = random_polynomial(s, k, rng)
    pts = random_simplex(rng, d, 60)
    vals = np.array([apply_generator(spec, p, DiscreteMeasure(s, w)) for w in pts])
    # degree-k homogeneous monomials in z span all degree <= k polynomials on the simplex
    feats = np.array([[np.prod(w[list(c)]) for c in itertools.combinations_with_replacement(range(d), k)] for w in pts])
    coef, *_ = np.linalg.lstsq(feats, vals, rcond=None)
    assert np.max(np.abs(feats @ coef - vals)) < 1e-10


def test_grid_dual_k1_is_B_and_constants():
    space = GridSpace(-2.0, 2.0, 21)
    x = space.nodes
    taper = 1 - (x / 2) ** 2
    spec = GeneratorSpec.grid(space, b=-x, sigma=taper, tau=0.5 * taper, alpha=0.7)
    h = np.cos(x)
    assert np.array_equal(build_dual(spec, 1).apply_array(h), apply_B(spec, h))
    for k in (1, 2, 3):
        assert np.max(np.abs(build_dual(spec, k).apply_array(np.ones((21,) * k)))) <= 1e-12


def test_grid_duality_identity():
    space = GridSpace(-2.0, 2.0, 15)
    x = space.nodes
    taper = 1 - (x / 2) ** 2
    spec = GeneratorSpec.grid(space, b=-x, sigma=taper, tau=0.5 * taper, alpha=lambda a, b: 0.5 + 0.1 * a * b)
    rng = np.random.default_rng(3)
    g = CoefficientTensor(space, random_symmetric(rng, 15, 2))
    Lg = CoefficientTensor(space, build_dual(spec, 2).apply_array(g.values))
    p = MeasurePolynomial.monomial(g)
    for w in random_simplex(rng, 15, 5):
        nu = DiscreteMeasure(space, w)
        assert apply_generator(spec, p, nu) == pytest.approx(eval_monomial(Lg, nu), abs=1e-9)


def test_grid_exchange_term_matches_psi():
    space = GridSpace(-1.0, 1.0, 9)
    spec = GeneratorSpec.grid(space, b=0.3, sigma=1 - space.nodes**2, alpha=1.3)
    h = CoefficientTensor(space, np.exp(space.nodes))
    u = CoefficientTensor.power(h, 2)
    B2 = np.multiply.outer(apply_B(spec, h.values), h.values) + np.multiply.outer(h.values, apply_B(spec, h.values))
    expected = B2 + 1.3 * psi(u).values * (1 - np.eye(9))
    assert np.allclose(build_dual(spec, 2).apply_array(u.values), expected, atol=1e-12)


def test_memory_guard_reports_sizes():
    spec = GeneratorSpec.finite(alpha=1.0, d=1000)
    with pytest.raises(MemoryGuardError) as err:
        build_dual(spec, 3)
    msg = str(err.value)
    assert "1000^3 = 1000000000" in msg and "C(1002,3) = 167167000" in msg
    with pytest.raises(ValueError):
        build_dual(GeneratorSpec.finite(alpha=1.0, d=2), 5)
    assert isinstance(build_dual(GeneratorSpec.finite(alpha=1.0, d=2), 4), RateMatrixDual)
