"""Exact moments on a finite space.

The moment formula ``E[<g, X_T^k>] = <u(T), X_0^k>`` needs ``u(t) = e^{t L_k} g``.
``L_k`` is a Markov rate matrix, so the exponential is evaluated by
uniformization: with ``Λ`` the largest exit rate and ``P = I + L_k/Λ``,

    e^{t L_k} g = Σ_m Poisson(m; Λt) P^m g,

a convex combination of stochastic-matrix powers that keeps positivity and
maps constants to constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .generator import GeneratorSpec, RateMatrixDual, build_dual
from .measure_poly import CoefficientTensor, DiscreteMeasure, eval_monomial
from .montecarlo import Estimate, batches, spawn_generators

POISSON_TAIL = 1e-12
# Λt per uniformization block; keeps e^{-Λt} far from underflow.
BLOCK_RATE = 20.0


class GeneratorError(ValueError):
    """The matrix is not a Markov generator."""


def check_rate_matrix(matrix: sp.spmatrix, tol: float = 1e-10) -> None:
    m = sp.csr_matrix(matrix)
    rows = np.asarray(m.sum(axis=1)).ravel()
    if np.max(np.abs(rows), initial=0.0) > tol:
        raise GeneratorError(f"row sums must vanish; largest is {rows[np.argmax(np.abs(rows))]:.3g}")
    off = m - sp.diags(m.diagonal())
    if off.nnz and off.data.min() < -tol:
        raise GeneratorError(f"negative off-diagonal rate {off.data.min():.3g}")


def _poisson_mix(P: sp.csr_matrix, v: np.ndarray, lam: float, tail: float) -> np.ndarray:
    w = math.exp(-lam)
    acc = w * v
    total = w
    m = 0
    while 1.0 - total > tail:
        m += 1
        v = P @ v
        w *= lam / m
        acc = acc + w * v
        total += w
        if m > lam + 50 * math.sqrt(lam) + 100:
            break
    # renormalize the truncated mixture so constants stay exactly constant
    return acc / total


def propagate(dual: RateMatrixDual, g: CoefficientTensor, t: float, tail: float = POISSON_TAIL) -> CoefficientTensor:
    """``e^{t L_k} g`` by uniformization."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if g.degree != dual.degree or g.space != dual.space:
        raise ValueError("dual operator and coefficient disagree on degree or space")
    check_rate_matrix(dual.matrix)
    rate = float(np.max(dual.exit_rates, initial=0.0))
    if t == 0 or rate == 0.0:
        return g
    P = (sp.identity(dual.matrix.shape[0], format="csr") + dual.matrix / rate).tocsr()
    n_blocks = max(1, math.ceil(rate * t / BLOCK_RATE))
    lam = rate * t / n_blocks
    v = g.values.reshape(-1)
    for _ in range(n_blocks):
        v = _poisson_mix(P, v, lam, tail)
    return CoefficientTensor(g.space, v.reshape(g.values.shape))


@dataclass(frozen=True)
class MomentSolution:
    degree: int
    times: np.ndarray
    u: list[CoefficientTensor]

    def at(self, i: int) -> CoefficientTensor:
        return self.u[i]

    def moments(self, nu: DiscreteMeasure) -> np.ndarray:
        return np.array([eval_monomial(u, nu) for u in self.u])


def solve_moments(dual: RateMatrixDual, g: CoefficientTensor, times) -> MomentSolution:
    """Snapshots of ``u`` at increasing output times, each started from the previous one."""
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or (times.size and times[0] < 0):
        raise ValueError("output times must be nonnegative and increasing")
    out, u, last = [], g, 0.0
    for t in times:
        u = propagate(dual, u, t - last)
        out.append(u)
        last = t
    return MomentSolution(g.degree, times, out)


def moment_finite(spec: GeneratorSpec, g: CoefficientTensor, nu: DiscreteMeasure, T: float) -> float:
    """``E[<g, X_T^k>]`` for ``X_0 = nu``."""
    return eval_monomial(propagate(build_dual(spec, g.degree), g, T), nu)


def moment_curve(spec: GeneratorSpec, g: CoefficientTensor, nu: DiscreteMeasure, times) -> np.ndarray:
    return solve_moments(build_dual(spec, g.degree), g, times).moments(nu)


# ---------------------------------------------------------------------------
# dual chain Monte Carlo


class _JumpTable:
    """Row-wise jump distributions of a rate matrix, searchable in one call.

    Row ``r``'s cumulative jump probabilities are shifted to ``(r, r+1]`` so a
    vector of states and uniforms resolves with a single ``searchsorted``.
    """

    def __init__(self, matrix: sp.spmatrix):
        m = sp.csr_matrix(matrix)
        off = (m - sp.diags(m.diagonal())).tocsr()
        off.eliminate_zeros()
        off.sort_indices()
        self.exit = np.asarray(off.sum(axis=1)).ravel()
        self.targets = off.indices
        keys = np.empty(off.nnz)
        for r in np.flatnonzero(self.exit > 0):
            lo, hi = off.indptr[r], off.indptr[r + 1]
            c = np.cumsum(off.data[lo:hi]) / self.exit[r]
            c[-1] = 1.0
            keys[lo:hi] = r + c
        self.keys = keys

    def jump(self, states: np.ndarray, u: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.keys, states + u, side="left")
        return self.targets[pos]


def run_chain(matrix: sp.spmatrix, states: np.ndarray, T: float, rng: np.random.Generator,
              table: _JumpTable | None = None) -> np.ndarray:
    """Advance a vector of chain states to time ``T`` (Gillespie, vectorized over paths)."""
    table = table or _JumpTable(matrix)
    states = np.array(states, dtype=np.int64)
    clock = np.zeros(states.size)
    active = np.ones(states.size, dtype=bool)
    while active.any():
        idx = np.flatnonzero(active)
        rate = table.exit[states[idx]]
        with np.errstate(divide="ignore"):
            hold = rng.exponential(size=idx.size) / rate
        clock[idx] += hold
        done = clock[idx] > T
        active[idx[done]] = False
        moving = idx[~done]
        if moving.size:
            states[moving] = table.jump(states[moving], rng.random(moving.size))
    return states


def state_index(x0, d: int) -> int:
    """Row-major index of a multi-index ``(i_1, ..., i_k)`` in ``E^k``."""
    x0 = tuple(int(i) for i in np.atleast_1d(x0))
    return int(np.ravel_multi_index(x0, (d,) * len(x0))) if x0 else 0


def simulate_dual_chain(dual: RateMatrixDual, x0, T: float, n_paths: int, rng_seed: int,
                        g: CoefficientTensor | None = None) -> Estimate:
    """Monte Carlo estimate of ``u(T, x0) = E[g(Z_T) | Z_0 = x0]`` for the k-particle chain.

    ``x0`` is a multi-index of length k (or a flat state index).  Without ``g``
    the estimator targets the constant 1.
    """
    d, k = dual.space.d, dual.degree
    start = int(x0) if np.ndim(x0) == 0 and k != 1 else state_index(x0, d)
    values = np.ones(d**k) if g is None else g.values.reshape(-1)
    table = _JumpTable(dual.matrix)
    sizes = batches(n_paths)
    samples = []
    for size, rng in zip(sizes, spawn_generators(rng_seed, len(sizes))):
        end = run_chain(dual.matrix, np.full(size, start), T, rng, table)
        samples.append(values[end])
    return Estimate.from_samples(np.concatenate(samples))
