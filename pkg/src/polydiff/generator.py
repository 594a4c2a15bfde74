"""Generators of measure-valued polynomial diffusions and their dual operators.

A generator is fixed by a mutation operator ``B`` acting on functions on ``E``
and a quadratic part ``Q`` acting on symmetric functions on ``E^2``:

    Lp(nu) = <B(∂p(nu)), nu> + ½ <Q(∂²p(nu)), nu²>

On a finite space ``B`` is a jump kernel and ``Q = α Ψ``.  On a grid ``B`` is
the drift-diffusion ``b g' + ½(σ² + τ²) g''`` and ``Q`` adds the common-noise
term ``τ(x)τ(y) ∂_x ∂_y G``.  For ``p = <g, nu^k>`` the identity
``Lp(nu) = <L_k g, nu^k>`` defines the dual operator

    L_k = Σ_i B^(i) + Σ_{i<j} Q^(ij)

which is the generator of a k-particle Markov process on ``E^k``.

All grid derivatives go through the stencil helpers below, so the pointwise
generator and the dual applier use identical discretizations and the duality
identity holds to rounding error on the grid as well.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .measure_poly import (
    CoefficientTensor,
    DiscreteMeasure,
    FiniteSpace,
    GridSpace,
    MeasurePolynomial,
    Space,
    SpaceMismatchError,
    derivative_tensor,
    poly_product,
    psi,
    space_from_dict,
    symmetric_basis_size,
)

MAX_DEGREE = 4
MAX_STATES = 10**7
MAX_RATE_ENTRIES = 5 * 10**7


class MemoryGuardError(ValueError):
    """The requested dual operator would be too large to build."""


# ---------------------------------------------------------------------------
# grid stencils


def _along(arr: np.ndarray, axis: int, ndim: int) -> np.ndarray:
    """Reshape a 1-d nodal array so it broadcasts along ``axis`` of an ndim array."""
    shape = [1] * ndim
    shape[axis] = arr.shape[0]
    return arr.reshape(shape)


def _slices(ndim: int, axis: int, sl: slice) -> tuple:
    idx = [slice(None)] * ndim
    idx[axis] = sl
    return tuple(idx)


def upwind_drift(u: np.ndarray, b: np.ndarray, h: float, axis: int = 0) -> np.ndarray:
    """``b ∂u`` with upwind differences; outward drift at an end node is dropped."""
    nd = u.ndim
    fwd = np.zeros_like(u)
    bwd = np.zeros_like(u)
    fwd[_slices(nd, axis, slice(0, -1))] = (u[_slices(nd, axis, slice(1, None))] - u[_slices(nd, axis, slice(0, -1))]) / h
    bwd[_slices(nd, axis, slice(1, None))] = (u[_slices(nd, axis, slice(1, None))] - u[_slices(nd, axis, slice(0, -1))]) / h
    bb = _along(b, axis, nd)
    return np.maximum(bb, 0.0) * fwd + np.minimum(bb, 0.0) * bwd


def second_difference(u: np.ndarray, h: float, axis: int = 0) -> np.ndarray:
    """Central ``∂²u`` with reflecting ghost nodes (``u[-1] = u[1]``)."""
    nd = u.ndim
    out = np.empty_like(u)
    mid = _slices(nd, axis, slice(1, -1))
    out[mid] = (u[_slices(nd, axis, slice(2, None))] - 2.0 * u[mid] + u[_slices(nd, axis, slice(0, -2))]) / h**2
    first, second = _slices(nd, axis, slice(0, 1)), _slices(nd, axis, slice(1, 2))
    last, before = _slices(nd, axis, slice(-1, None)), _slices(nd, axis, slice(-2, -1))
    out[first] = 2.0 * (u[second] - u[first]) / h**2
    out[last] = 2.0 * (u[before] - u[last]) / h**2
    return out


def central_difference(u: np.ndarray, h: float, axis: int = 0) -> np.ndarray:
    """Central ``∂u``; second-order one-sided at the two ends."""
    nd = u.ndim
    s = lambda a, b=None: u[_slices(nd, axis, slice(a, b))]  # noqa: E731
    out = np.empty_like(u)
    out[_slices(nd, axis, slice(1, -1))] = (s(2) - s(0, -2)) / (2 * h)
    out[_slices(nd, axis, slice(0, 1))] = (-3 * s(0, 1) + 4 * s(1, 2) - s(2, 3)) / (2 * h)
    out[_slices(nd, axis, slice(-1, None))] = (3 * s(-1) - 4 * s(-2, -1) + s(-3, -2)) / (2 * h)
    return out


def pair_exchange(u: np.ndarray, alpha: np.ndarray, s: int, t: int) -> np.ndarray:
    """``α(x_s,x_t) [½(u(x^{t←s}) + u(x^{s←t})) - u(x)]`` for slots ``s < t``.

    ``x^{t←s}`` is ``x`` with coordinate ``t`` overwritten by ``x_s``.
    """
    nd = u.ndim
    diag = np.diagonal(u, axis1=s, axis2=t)
    copy_s = np.expand_dims(np.moveaxis(diag, -1, s), t)
    copy_t = np.swapaxes(copy_s, s, t)
    shape = [1] * nd
    shape[s] = shape[t] = alpha.shape[0]
    a = alpha.reshape(shape) if s < t else alpha.T.reshape(shape)
    return a * (0.5 * (copy_s + copy_t) - u)


# ---------------------------------------------------------------------------
# generator specification


def _as_nodal(value, n: int, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(n, float(arr))
    if arr.shape != (n,):
        raise ValueError(f"{name} must have {n} entries, got shape {arr.shape}")
    return arr


def _as_alpha(value, n: int) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full((n, n), float(arr))
    if arr.shape != (n, n):
        raise ValueError(f"alpha must be {n}x{n}, got shape {arr.shape}")
    np.fill_diagonal(arr, 0.0)
    return arr


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    """Coefficients ``(B, α, τ)`` of a measure-valued polynomial diffusion.

    Finite spaces carry a jump kernel (diagonal ignored).  Grid spaces carry
    nodal drift ``b``, idiosyncratic volatility ``sigma`` and common-noise
    volatility ``tau``.  The diagonal of ``alpha`` is set to zero since the
    exchange form vanishes there.  Admissibility is not enforced here; see
    :func:`validate_spec`.
    """

    space: Space
    alpha: np.ndarray
    kernel: np.ndarray | None = None
    b: np.ndarray | None = None
    sigma: np.ndarray | None = None
    tau: np.ndarray | None = None

    def __post_init__(self):
        n = self.space.size
        object.__setattr__(self, "alpha", _as_alpha(self.alpha, n))
        if isinstance(self.space, FiniteSpace):
            if any(v is not None for v in (self.b, self.sigma, self.tau)):
                raise ValueError("finite spaces take a jump kernel, not drift/volatility")
            kernel = np.zeros((n, n)) if self.kernel is None else np.array(self.kernel, dtype=float)
            if kernel.shape != (n, n):
                raise ValueError(f"kernel must be {n}x{n}, got shape {kernel.shape}")
            np.fill_diagonal(kernel, 0.0)
            object.__setattr__(self, "kernel", kernel)
        else:
            if self.kernel is not None:
                raise ValueError("grid spaces take drift/volatility, not a jump kernel")
            for name in ("b", "sigma", "tau"):
                val = getattr(self, name)
                object.__setattr__(self, name, _as_nodal(0.0 if val is None else val, n, name))
        for name in ("alpha", "kernel", "b", "sigma", "tau"):
            val = getattr(self, name)
            if val is not None:
                val.setflags(write=False)

    @classmethod
    def finite(cls, kernel=None, alpha=0.0, d: int | None = None) -> GeneratorSpec:
        if d is None:
            if kernel is not None:
                d = np.shape(kernel)[0]
            elif np.ndim(alpha) == 2:
                d = np.shape(alpha)[0]
            else:
                raise ValueError("cannot infer d; pass it explicitly")
        return cls(FiniteSpace(d), alpha=alpha, kernel=kernel)

    @classmethod
    def grid(cls, space: GridSpace, b=0.0, sigma=0.0, tau=0.0, alpha=0.0) -> GeneratorSpec:
        """Grid spec; callables are sampled on the nodes."""
        x = space.nodes
        sample = lambda f: f(x) if callable(f) else f  # noqa: E731
        if callable(alpha):
            alpha = alpha(x[:, None], x[None, :]) * np.ones((space.n, space.n))
        return cls(space, alpha=alpha, b=sample(b), sigma=sample(sigma), tau=sample(tau))

    @property
    def is_grid(self) -> bool:
        return isinstance(self.space, GridSpace)

    @property
    def diffusion(self) -> np.ndarray:
        """Total local variance ``a = σ² + τ²`` (grid only)."""
        return self.sigma**2 + self.tau**2

    def with_alpha(self, alpha) -> GeneratorSpec:
        return GeneratorSpec(self.space, alpha, self.kernel, self.b, self.sigma, self.tau)


def _load_array(value, base_dir=None):
    if isinstance(value, Mapping) and "csv" in value:
        from pathlib import Path

        path = Path(value["csv"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return np.loadtxt(path, delimiter=",", ndmin=1)
    return value


def spec_from_dict(doc: Mapping, base_dir=None) -> GeneratorSpec:
    """Load ``{space, mutation: {kernel | drift_diffusion}, alpha: {...}, tau: [...]}``.

    ``alpha`` is ``{"constant": c}``, ``{"matrix": [[...]]}`` or ``{"table": ...}``
    (a nodal matrix sampled on the grid).  Arrays may be inlined or given as
    ``{"csv": path}``.
    """
    space = space_from_dict(doc["space"])
    alpha_doc = doc.get("alpha", {"constant": 0.0})
    if isinstance(alpha_doc, Mapping):
        if "constant" in alpha_doc:
            alpha = float(alpha_doc["constant"])
        elif "matrix" in alpha_doc:
            alpha = _load_array(alpha_doc["matrix"], base_dir)
        elif "table" in alpha_doc:
            alpha = _load_array(alpha_doc["table"], base_dir)
        else:
            raise ValueError("alpha needs one of 'constant', 'matrix', 'table'")
    else:
        alpha = alpha_doc
    alpha = np.array(alpha, dtype=float)
    if alpha.ndim == 1:
        alpha = alpha.reshape(space.size, space.size)
    mutation = doc.get("mutation", {}) or {}
    if isinstance(space, FiniteSpace):
        if "drift_diffusion" in mutation or "tau" in doc:
            raise ValueError("finite spaces take a jump kernel, not drift/volatility")
        kernel = mutation.get("kernel")
        kernel = None if kernel is None else np.array(_load_array(kernel, base_dir), dtype=float).reshape(space.d, space.d)
        return GeneratorSpec(space, alpha=alpha, kernel=kernel)
    if "kernel" in mutation:
        raise ValueError("grid spaces take drift_diffusion, not a jump kernel")
    dd = mutation.get("drift_diffusion", {}) or {}
    return GeneratorSpec(
        space,
        alpha=alpha,
        b=_load_array(dd.get("b", 0.0), base_dir),
        sigma=_load_array(dd.get("sigma", 0.0), base_dir),
        tau=_load_array(doc.get("tau", dd.get("tau", 0.0)), base_dir),
    )


def spec_to_dict(spec: GeneratorSpec) -> dict:
    doc = {"space": spec.space.to_dict(), "alpha": {"matrix": spec.alpha.tolist()}}
    if spec.is_grid:
        doc["mutation"] = {"drift_diffusion": {"b": spec.b.tolist(), "sigma": spec.sigma.tolist()}}
        doc["tau"] = spec.tau.tolist()
    else:
        doc["mutation"] = {"kernel": spec.kernel.tolist()}
    return doc


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_spec(spec: GeneratorSpec, tol: float = 1e-12) -> ValidationReport:
    """List every admissibility condition the spec violates."""
    report = ValidationReport()
    a = spec.alpha
    if not np.all(np.isfinite(a)):
        report.violations.append("α not finite (must be bounded)")
    if np.max(np.abs(a - a.T), initial=0.0) > tol:
        report.violations.append("α not symmetric")
    if np.any(a < -tol):
        report.violations.append("α has negative entries")
    if spec.is_grid:
        for name in ("b", "sigma", "tau"):
            if not np.all(np.isfinite(getattr(spec, name))):
                report.violations.append(f"{name} not finite")
        if abs(spec.tau[0]) > tol or abs(spec.tau[-1]) > tol:
            report.violations.append("boundary tangency: τ must vanish at x_min and x_max")
        if abs(spec.sigma[0]) > tol or abs(spec.sigma[-1]) > tol:
            report.violations.append("boundary tangency: σ must vanish at x_min and x_max")
    else:
        if not np.all(np.isfinite(spec.kernel)):
            report.violations.append("ν_B not finite")
        if np.any(spec.kernel < -tol):
            report.violations.append("ν_B has negative entries")
    return report


# ---------------------------------------------------------------------------
# B, Q and L


def _nodal(spec: GeneratorSpec, h) -> np.ndarray:
    arr = h.values if isinstance(h, CoefficientTensor) else np.asarray(h, dtype=float)
    if isinstance(h, CoefficientTensor) and h.space != spec.space:
        raise SpaceMismatchError(f"space mismatch: {spec.space} vs {h.space}")
    if arr.shape != (spec.space.size,):
        raise SpaceMismatchError(f"function of shape {arr.shape} does not live on {spec.space}")
    return arr


def _apply_B_axis(spec: GeneratorSpec, u: np.ndarray, axis: int) -> np.ndarray:
    if spec.is_grid:
        h = spec.space.h
        a = _along(spec.diffusion, axis, u.ndim)
        return upwind_drift(u, spec.b, h, axis) + 0.5 * a * second_difference(u, h, axis)
    # (Bu)(i) = Σ_j ν_B(i,j) (u(j) - u(i))
    moved = np.moveaxis(u, axis, 0)
    out = np.tensordot(spec.kernel, moved, axes=(1, 0)) - spec.kernel.sum(axis=1).reshape((-1,) + (1,) * (u.ndim - 1)) * moved
    return np.moveaxis(out, 0, axis)


def apply_B(spec: GeneratorSpec, h) -> np.ndarray:
    """Mutation operator applied to a function on ``E``."""
    return _apply_B_axis(spec, _nodal(spec, h), 0)


def _mixed_term(spec: GeneratorSpec, u: np.ndarray, s: int, t: int, grad_s: np.ndarray | None = None) -> np.ndarray:
    h = spec.space.h
    ds = central_difference(u, h, s) if grad_s is None else grad_s
    dst = central_difference(ds, h, t)
    return _along(spec.tau, s, u.ndim) * _along(spec.tau, t, u.ndim) * dst


def apply_Q(spec: GeneratorSpec, G: CoefficientTensor) -> CoefficientTensor:
    """``α Ψ(G) + τ(x)τ(y) ∂_x∂_y G`` (the τ part only on grids)."""
    if G.space != spec.space:
        raise SpaceMismatchError(f"space mismatch: {spec.space} vs {G.space}")
    if G.degree != 2:
        raise ValueError("Q acts on degree-2 coefficients")
    out = spec.alpha * psi(G).values
    if spec.is_grid:
        out = out + _mixed_term(spec, G.values, 0, 1, G.slot_derivative)
    return CoefficientTensor(spec.space, out)


def apply_generator(spec: GeneratorSpec, p: MeasurePolynomial, nu: DiscreteMeasure) -> float:
    """``Lp(nu)`` from the first and second derivatives of ``p`` at ``nu``."""
    if p.space != spec.space or nu.space != spec.space:
        raise SpaceMismatchError("generator, polynomial and measure must share a space")
    w = nu.weights
    first = derivative_tensor(p, nu, 1)
    second = CoefficientTensor(spec.space, derivative_tensor(p, nu, 2))
    return float(apply_B(spec, first) @ w + 0.5 * (w @ apply_Q(spec, second).values @ w))


def carre_du_champ(spec: GeneratorSpec, p: MeasurePolynomial, q: MeasurePolynomial, nu: DiscreteMeasure) -> float:
    """``Γ(p, q) = L(pq) - p Lq - q Lp``."""
    L = lambda r: apply_generator(spec, r, nu)  # noqa: E731
    return L(poly_product(p, q)) - p(nu) * L(q) - q(nu) * L(p)


# ---------------------------------------------------------------------------
# dual operators


class DualOperator:
    """``L_k`` acting on degree-k coefficients."""

    space: Space
    degree: int

    def apply_array(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply(self, g: CoefficientTensor) -> CoefficientTensor:
        if g.space != self.space or g.degree != self.degree:
            raise ValueError(f"dual operator of degree {self.degree} cannot act on a degree-{g.degree} tensor")
        return CoefficientTensor(self.space, self.apply_array(g.values))

    __call__ = apply


@dataclass(frozen=True, eq=False)
class RateMatrixDual(DualOperator):
    """Explicit generator matrix of the k-particle chain on ``E^k``.

    States are indexed row-major: ``(i_1..i_k) -> Σ_j i_j d^(k-j)``.
    """

    space: FiniteSpace
    degree: int
    matrix: sp.csr_matrix

    def apply_array(self, u: np.ndarray) -> np.ndarray:
        return (self.matrix @ u.reshape(-1)).reshape(u.shape)

    @property
    def exit_rates(self) -> np.ndarray:
        return -self.matrix.diagonal()


@dataclass(frozen=True, eq=False)
class StencilDual(DualOperator):
    """Matrix-free ``L_k`` on the grid ``n^k``; pure, so safe to call concurrently."""

    space: GridSpace
    degree: int
    spec: GeneratorSpec

    def apply_array(self, u: np.ndarray) -> np.ndarray:
        spec = self.spec
        out = np.zeros_like(u)
        for s in range(self.degree):
            out += _apply_B_axis(spec, u, s)
        has_alpha = bool(np.any(spec.alpha))
        has_tau = bool(np.any(spec.tau))
        for s, t in itertools.combinations(range(self.degree), 2):
            if has_alpha:
                out += pair_exchange(u, spec.alpha, s, t)
            if has_tau:
                out += _mixed_term(spec, u, s, t)
        return out

    def rate_bound(self) -> float:
        """Gershgorin-type bound on the exit rate of any grid state."""
        spec, k, h = self.spec, self.degree, self.space.h
        drift = np.max(np.abs(spec.b)) / h
        diff = np.max(spec.diffusion) / h**2
        exchange = k * (k - 1) / 2 * np.max(spec.alpha, initial=0.0)
        cross = k * (k - 1) * np.max(np.abs(np.outer(spec.tau, spec.tau))) / (2 * h**2) * 2
        return float(k * (drift + diff) + exchange + cross)


def _guard(space: Space, k: int, max_degree: int, max_states: int) -> int:
    if not 1 <= k <= max_degree:
        raise ValueError(f"degree k={k} outside the supported range 1..{max_degree}")
    n = space.size
    states = n**k
    if states > max_states:
        raise MemoryGuardError(
            f"dual operator on {n}^{k} = {states} states exceeds the cap of {max_states}; "
            f"the symmetric basis would have N = C({k + n - 1},{k}) = {symmetric_basis_size(n, k)} entries"
        )
    return states


def build_dual(spec: GeneratorSpec, k: int, max_degree: int = MAX_DEGREE,
               max_states: int = MAX_STATES) -> DualOperator:
    """Assemble ``L_k``: a sparse rate matrix (finite) or a stencil applier (grid)."""
    states = _guard(spec.space, k, max_degree, max_states)
    if spec.is_grid:
        return StencilDual(spec.space, k, spec)
    d = spec.space.d
    est = states * (k * (d - 1) + k * (k - 1) + 1)
    if est > MAX_RATE_ENTRIES:
        raise MemoryGuardError(
            f"rate matrix on {d}^{k} = {states} states needs ~{est} entries (cap {MAX_RATE_ENTRIES}); "
            f"the symmetric basis would have N = C({k + d - 1},{k}) = {symmetric_basis_size(d, k)} entries"
        )
    idx = np.arange(states)
    digits = np.stack(np.unravel_index(idx, (d,) * k), axis=1) if k > 0 else np.zeros((1, 0), int)
    place = d ** np.arange(k - 1, -1, -1)
    rows, cols, vals = [], [], []
    kernel = spec.kernel
    for s in range(k):
        xs = digits[:, s]
        for v in range(d):
            rate = kernel[xs, v]
            mask = (rate != 0) & (xs != v)
            rows.append(idx[mask])
            cols.append(idx[mask] + (v - xs[mask]) * place[s])
            vals.append(rate[mask])
    for s, t in itertools.combinations(range(k), 2):
        xs, xt = digits[:, s], digits[:, t]
        rate = 0.5 * spec.alpha[xs, xt]
        mask = (xs != xt) & (rate != 0)
        # slot t copies slot s, and slot s copies slot t
        rows += [idx[mask], idx[mask]]
        cols += [idx[mask] + (xs[mask] - xt[mask]) * place[t], idx[mask] + (xt[mask] - xs[mask]) * place[s]]
        vals += [rate[mask], rate[mask]]
    rows = np.concatenate(rows) if rows else np.zeros(0, int)
    cols = np.concatenate(cols) if cols else np.zeros(0, int)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    off = sp.coo_matrix((vals, (rows, cols)), shape=(states, states)).tocsr()
    off.sum_duplicates()
    exit_rates = np.asarray(off.sum(axis=1)).ravel()
    matrix = (off - sp.diags(exit_rates)).tocsr()
    return RateMatrixDual(spec.space, k, matrix)


def dual_cost_summary(space: Space, k: int) -> dict:
    """Sizes of the dense and symmetric representations on ``E^k``."""
    n = space.size
    return {"states": n**k, "symmetric_basis": symmetric_basis_size(n, k)}
