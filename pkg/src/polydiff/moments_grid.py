"""Moments on a grid: time-stepping ``∂u/∂t = L_k u`` on the ``n^k`` tensor grid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Union

import numpy as np

from .generator import GeneratorSpec, StencilDual, build_dual, validate_spec
from .measure_poly import CoefficientTensor, DiscreteMeasure, eval_monomial
from .moments_finite import MomentSolution


class InstabilityError(RuntimeError):
    """The explicit scheme left the range allowed by the maximum principle."""


@dataclass(frozen=True)
class PideConfig:
    """Time stepping options.

    ``dt="auto"`` picks ``safety / rate_bound`` where ``rate_bound`` bounds the
    exit rate of every grid state.  Violations of ``min g <= u <= max g`` are
    recorded each step; growth beyond ``abort_tol`` raises when ``strict``.
    """

    dt: Union[float, Literal["auto"]] = "auto"
    scheme: Literal["rk4", "euler"] = "rk4"
    safety: float = 0.5
    abort_tol: float = 1e-6
    strict: bool = True

    def __post_init__(self):
        if self.scheme not in ("rk4", "euler"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0 < self.safety <= 1:
            raise ValueError("safety factor must lie in (0, 1]")
        if self.dt != "auto" and not float(self.dt) > 0:
            raise ValueError("dt must be positive or 'auto'")


@dataclass
class PideDiagnostics:
    steps: int = 0
    dt: float = 0.0
    max_overshoot: float = 0.0
    violations: int = 0
    constant_residual: float = 0.0


@dataclass(frozen=True)
class GridMomentSolution(MomentSolution):
    diagnostics: PideDiagnostics = field(default_factory=PideDiagnostics)


def discretize_dual_grid(spec: GeneratorSpec, k: int, **guard) -> StencilDual:
    """Stencil applier for ``L_k`` on the grid (memory-guarded)."""
    if not spec.is_grid:
        raise ValueError("discretize_dual_grid needs a grid spec")
    report = validate_spec(spec)
    if not report.ok:
        raise ValueError("inadmissible grid spec: " + "; ".join(report.violations))
    return build_dual(spec, k, **guard)


def stable_dt(applier: StencilDual, config: PideConfig) -> float:
    bound = applier.rate_bound()
    if config.dt == "auto":
        return math.inf if bound == 0 else config.safety / bound
    return float(config.dt)


def _rk4(f, u, dt):
    k1 = f(u)
    k2 = f(u + 0.5 * dt * k1)
    k3 = f(u + 0.5 * dt * k2)
    k4 = f(u + dt * k3)
    return u + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def solve_moment_pide(applier: StencilDual, g: CoefficientTensor, T, config: PideConfig | None = None) -> GridMomentSolution:
    """Integrate ``u' = L_k u`` from ``u(0) = g`` to each time in ``T``.

    ``T`` may be a scalar or an increasing sequence of output times.
    """
    config = config or PideConfig()
    times = np.atleast_1d(np.asarray(T, dtype=float))
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("output times must be nonnegative and increasing")
    if g.degree != applier.degree or g.space != applier.space:
        raise ValueError("applier and coefficient disagree on degree or space")
    f = applier.apply_array
    diag = PideDiagnostics()
    ones = np.ones_like(g.values)
    diag.constant_residual = float(np.max(np.abs(f(ones))))
    dt_max = stable_dt(applier, config)
    lo, hi = float(g.values.min()), float(g.values.max())
    scale = max(abs(lo), abs(hi), 1.0)
    step = _rk4 if config.scheme == "rk4" else (lambda f_, u_, dt_: u_ + dt_ * f_(u_))
    u = np.array(g.values)
    out, now = [], 0.0
    for t_out in times:
        span = t_out - now
        if span > 0:
            n_steps = max(1, math.ceil(span / dt_max - 1e-9)) if math.isfinite(dt_max) else 1
            dt = span / n_steps
            diag.dt = dt
            for _ in range(n_steps):
                u = step(f, u, dt)
                diag.steps += 1
                over = max(float(u.max()) - hi, lo - float(u.min()), 0.0)
                if over > 0:
                    diag.max_overshoot = max(diag.max_overshoot, over)
                    if over > 1e-12 * scale:
                        diag.violations += 1
                    if config.strict and over > config.abort_tol * scale:
                        raise InstabilityError(
                            f"max principle violated by {over:.3g} at t={now + diag.steps * dt:.4g}; "
                            f"dt={dt:.3g} vs CFL-type bound {config.safety}/{applier.rate_bound():.3g}"
                        )
        now = t_out
        out.append(CoefficientTensor(g.space, u))
    return GridMomentSolution(g.degree, times, out, diag)


def moment_grid(spec: GeneratorSpec, g: CoefficientTensor, nu: DiscreteMeasure, T: float,
                config: PideConfig | None = None) -> float:
    """``E[<g, X_T^k>]`` for ``X_0 = nu`` (atomic on grid nodes)."""
    applier = discretize_dual_grid(spec, g.degree)
    sol = solve_moment_pide(applier, g, T, config)
    return eval_monomial(sol.u[-1], nu)
