"""Stochastic oracles: a simplex SDE, Moran-type particle systems and a
common-noise particle system, plus empirical moment estimators.

These never touch the dual operators; they only share the generator
coefficients, so agreement with the moment engines is a genuine cross-check.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .generator import GeneratorSpec
from .measure_poly import CoefficientTensor, DiscreteMeasure, FiniteSpace, GridSpace, Space
from .montecarlo import batches, spawn_generators

SIMPLEX_TOL = 1e-9


# ---------------------------------------------------------------------------
# simplex SDE


@dataclass(frozen=True)
class SimplexPath:
    """Weights of ``X_t = Σ_i Z^i_t δ_i`` at the saved times.

    ``weights`` has shape ``(len(times), n_paths, d)``.
    """

    times: np.ndarray
    weights: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.weights[-1]


def _pairs(d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pair index arrays and the incidence matrix with rows ``e_i - e_j``."""
    pairs = list(itertools.combinations(range(d), 2))
    ii = np.array([p[0] for p in pairs], dtype=int)
    jj = np.array([p[1] for p in pairs], dtype=int)
    inc = np.zeros((len(pairs), d))
    inc[np.arange(len(pairs)), ii] = 1.0
    inc[np.arange(len(pairs)), jj] = -1.0
    return ii, jj, inc


def simplex_drift(spec: GeneratorSpec, z: np.ndarray) -> np.ndarray:
    """``b_k(z) = Σ_i (ν_B(i,k) z_i - ν_B(k,i) z_k)``; works on stacked rows of z."""
    return z @ spec.kernel - z * spec.kernel.sum(axis=1)


def simplex_noise(spec: GeneratorSpec, z: np.ndarray) -> np.ndarray:
    """Loadings ``sqrt(α(i,j) z_i z_j)`` of the pair noises ``W^{ij}``, ``i < j``."""
    ii, jj, _ = _pairs(spec.space.d)
    return np.sqrt(np.maximum(spec.alpha[ii, jj] * z[..., ii] * z[..., jj], 0.0))


def simplex_covariance(spec: GeneratorSpec, z: np.ndarray) -> np.ndarray:
    """``σσ^T`` assembled from the pair noise factorization."""
    _, _, inc = _pairs(spec.space.d)
    s = simplex_noise(spec, np.asarray(z, dtype=float))
    return inc.T @ (s[:, None] ** 2 * inc)


def simplex_sde_step(spec: GeneratorSpec, z: np.ndarray, dt: float, rng: np.random.Generator) -> np.ndarray:
    _, _, inc = _pairs(spec.space.d)
    dw = rng.standard_normal((z.shape[0], inc.shape[0])) * np.sqrt(dt)
    z = z + simplex_drift(spec, z) * dt + (simplex_noise(spec, z) * dw) @ inc
    z = np.maximum(z, 0.0)
    return z / z.sum(axis=1, keepdims=True)


def _time_grid(T: float, dt: float, save_times) -> tuple[np.ndarray, list[np.ndarray]]:
    """Saved times and, per saved interval, the list of step sizes."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    save = np.array([0.0, T] if save_times is None else sorted({0.0, float(T), *map(float, save_times)}))
    if save[-1] > T + 1e-12 or save[0] < 0:
        raise ValueError("save times must lie in [0, T]")
    steps = []
    for a, b in zip(save[:-1], save[1:]):
        n = max(1, int(np.ceil((b - a) / dt - 1e-9)))
        steps.append(np.full(n, (b - a) / n))
    return save, steps


def simulate_simplex_sde(spec: GeneratorSpec, z0, T: float, dt: float, rng_seed: int,
                         n_paths: int = 1, save_times=None) -> SimplexPath:
    """Euler-Maruyama for ``dZ = b(Z)dt + Σ_{i<j} sqrt(α_ij Z_i Z_j)(e_i - e_j) dW^{ij}``.

    Negative coordinates are clipped and the vector renormalized after each step.
    """
    if spec.is_grid:
        raise ValueError("the simplex SDE needs a finite space")
    z0 = np.asarray(z0, dtype=float)
    d = spec.space.d
    if z0.shape != (d,) or np.any(z0 < -SIMPLEX_TOL) or abs(z0.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("z0 must be a point of the simplex")
    save, steps = _time_grid(T, dt, save_times)
    sizes = batches(n_paths)
    out = np.empty((save.size, n_paths, d))
    start = 0
    for size, rng in zip(sizes, spawn_generators(rng_seed, len(sizes))):
        z = np.tile(np.maximum(z0, 0.0) / np.maximum(z0, 0.0).sum(), (size, 1))
        out[0, start:start + size] = z
        for i, seg in enumerate(steps):
            for h in seg:
                z = simplex_sde_step(spec, z, h, rng)
            out[i + 1, start:start + size] = z
        start += size
    return SimplexPath(save, out)


# ---------------------------------------------------------------------------
# particle systems


@dataclass(frozen=True)
class ParticleEnsemble:
    """``N`` particles at one time; positions are labels (finite) or reals (grid)."""

    space: Space
    positions: np.ndarray
    time: float
    stream: int = 0

    @property
    def N(self) -> int:
        return self.positions.shape[-1]


@dataclass(frozen=True)
class ParticlePath:
    """Positions of ``reps`` independent ensembles at the saved times.

    ``positions`` has shape ``(len(times), reps, N)``.
    """

    space: Space
    times: np.ndarray
    positions: np.ndarray

    @property
    def N(self) -> int:
        return self.positions.shape[-1]

    def ensemble(self, t_index: int = -1, rep: int = 0) -> ParticleEnsemble:
        return ParticleEnsemble(self.space, self.positions[t_index, rep], float(self.times[t_index]), rep)

    def moments(self, g: CoefficientTensor, t_index: int = -1) -> np.ndarray:
        """``<g, X_N^k>`` for every repetition at one saved time."""
        return empirical_moments(self.space, self.positions[t_index], g)


def quota_allocation(weights: np.ndarray, N: int) -> np.ndarray:
    """Particle labels whose counts round ``N * weights`` by largest remainder."""
    raw = np.asarray(weights) * N
    counts = np.floor(raw).astype(int)
    short = N - counts.sum()
    if short > 0:
        counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    return np.repeat(np.arange(len(weights)), counts)


def _initial_positions(space: Space, initial, N: int, reps: int, init: str, rng: np.random.Generator) -> np.ndarray:
    if isinstance(initial, DiscreteMeasure):
        labels = np.arange(space.size)
        if init == "quota":
            base = quota_allocation(initial.weights, N)
            idx = np.tile(base, (reps, 1))
        elif init == "iid":
            idx = rng.choice(labels, size=(reps, N), p=initial.weights)
        else:
            raise ValueError(f"unknown init {init!r}; use 'quota' or 'iid'")
        if isinstance(space, GridSpace):
            return space.nodes[idx]
        return idx
    pos = np.asarray(initial)
    if pos.ndim == 0:
        pos = np.full(N, pos)
    if pos.shape != (N,):
        raise ValueError(f"explicit positions must have length N={N}")
    return np.tile(pos, (reps, 1))


def _interp_alpha(space: GridSpace, alpha: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a nodal α at point pairs."""
    fx = np.clip((x - space.x_min) / space.h, 0, space.n - 1 - 1e-12)
    fy = np.clip((y - space.x_min) / space.h, 0, space.n - 1 - 1e-12)
    i, j = fx.astype(int), fy.astype(int)
    tx, ty = fx - i, fy - j
    return ((1 - tx) * (1 - ty) * alpha[i, j] + tx * (1 - ty) * alpha[i + 1, j]
            + (1 - tx) * ty * alpha[i, j + 1] + tx * ty * alpha[i + 1, j + 1])


class _MutationTable:
    """Thinned jump sampler for a finite kernel with uniform bound ``qmax``."""

    def __init__(self, kernel: np.ndarray):
        self.qmax = float(kernel.sum(axis=1).max(initial=0.0))
        if self.qmax > 0:
            self.cum = np.cumsum(kernel, axis=1) / self.qmax

    def jump(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        cum = self.cum[x]
        target = (u[:, None] >= cum).sum(axis=1)
        # beyond the row total the proposal is a virtual jump
        return np.where(target < cum.shape[1], target, x)


def _resample_round(pos, reps_idx, rng, N, alpha_fn, amax):
    """One proposed resampling event per listed repetition."""
    m = reps_idx.size
    i = rng.integers(N, size=m)
    j = (i + 1 + rng.integers(N - 1, size=m)) % N
    xi, xj = pos[reps_idx, i], pos[reps_idx, j]
    accept = rng.random(m) * amax < alpha_fn(xi, xj)
    pos[reps_idx[accept], j[accept]] = xi[accept]


def _grid_coeff(space: GridSpace, values: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.interp(x, space.nodes, values)


def _euler_move(spec: GeneratorSpec, pos: np.ndarray, dt: float, rng: np.random.Generator) -> np.ndarray:
    space = spec.space
    reps, N = pos.shape
    dw = rng.standard_normal((reps, N)) * np.sqrt(dt)
    dw0 = rng.standard_normal((reps, 1)) * np.sqrt(dt)
    b = _grid_coeff(space, spec.b, pos)
    s = _grid_coeff(space, spec.sigma, pos)
    t = _grid_coeff(space, spec.tau, pos)
    return np.clip(pos + b * dt + s * dw + t * dw0, space.x_min, space.x_max)


def simulate_moran(spec: GeneratorSpec, initial, N: int, T: float, rng_seed: int, n_reps: int = 1,
                   save_times=None, dt: float | None = None, init: str = "quota") -> ParticlePath:
    """Moran particle system with resampling rate ``α(x, y)/2`` per ordered pair.

    Each ordered pair ``(i, j)`` fires at rate ``α(Z^i, Z^j)/2`` and replaces
    particle ``j`` by a copy of particle ``i``; proposals are thinned against
    ``max α / 2``.  On a finite space particles also jump by the kernel
    ``ν_B`` (exact event simulation).  On a grid they follow the
    drift-diffusion with a common noise shared within a repetition, and each
    Euler step of size ``dt`` is followed by that step's resampling events.
    """
    if N < 2:
        raise ValueError("the Moran system needs N >= 2")
    space = spec.space
    if spec.is_grid and dt is None:
        raise ValueError("grid Moran needs an Euler step dt")
    save, steps = _time_grid(T, dt if dt is not None else max(T, 1.0), save_times)
    amax = float(np.max(spec.alpha, initial=0.0))
    if np.any(spec.alpha < 0):
        raise ValueError("resampling rates must be nonnegative")
    if spec.is_grid:
        alpha_fn = (lambda x, y: np.full(x.shape, amax)) if np.ptp(spec.alpha[~np.eye(space.n, dtype=bool)]) == 0 \
            else (lambda x, y: np.where(x == y, 0.0, _interp_alpha(space, spec.alpha, x, y)))
    else:
        alpha_fn = lambda x, y: spec.alpha[x, y]  # noqa: E731
    resample_rate = N * (N - 1) * amax / 2
    sizes = batches(n_reps, 256)
    gens = spawn_generators(rng_seed, len(sizes))
    out = []
    for size, rng in zip(sizes, gens):
        pos = _initial_positions(space, initial, N, size, init, rng)
        pos = pos.astype(float if spec.is_grid else np.int64)
        snaps = [pos.copy()]
        if spec.is_grid:
            for seg in steps:
                for h in seg:
                    pos = _euler_move(spec, pos, h, rng)
                    if resample_rate > 0:
                        counts = rng.poisson(resample_rate * h, size=size)
                        for m in range(int(counts.max(initial=0))):
                            _resample_round(pos, np.flatnonzero(counts > m), rng, N, alpha_fn, amax)
                snaps.append(pos.copy())
        else:
            mut = _MutationTable(spec.kernel)
            total = N * mut.qmax + resample_rate
            p_mut = N * mut.qmax / total if total > 0 else 0.0
            rows = np.arange(size)
            for a, b in zip(save[:-1], save[1:]):
                clock = np.full(size, a)
                active = np.ones(size, dtype=bool) if total > 0 else np.zeros(size, dtype=bool)
                while active.any():
                    idx = rows[active]
                    clock[idx] += rng.exponential(1.0 / total, size=idx.size)
                    fire = clock[idx] <= b
                    active[idx[~fire]] = False
                    idx = idx[fire]
                    if idx.size == 0:
                        continue
                    is_mut = rng.random(idx.size) < p_mut
                    mi = idx[is_mut]
                    if mi.size:
                        who = rng.integers(N, size=mi.size)
                        pos[mi, who] = mut.jump(pos[mi, who], rng.random(mi.size))
                    ri = idx[~is_mut]
                    if ri.size:
                        _resample_round(pos, ri, rng, N, alpha_fn, amax)
                snaps.append(pos.copy())
        out.append(np.stack(snaps))
    return ParticlePath(space, save, np.concatenate(out, axis=1))


def simulate_common_noise(spec: GeneratorSpec, x0, N: int, T: float, dt: float, rng_seed: int,
                          n_reps: int = 1, save_times=None) -> ParticlePath:
    """Euler-Maruyama for ``dZ^i = b dt + σ dW^i + τ dW^0`` with one shared ``W^0``.

    Positions are clamped to the grid interval.  Only the ``α = 0`` sector is
    covered; resampling belongs to :func:`simulate_moran`.
    """
    if not spec.is_grid:
        raise ValueError("the common-noise system needs a grid space")
    if np.any(spec.alpha != 0):
        raise ValueError("simulate_common_noise requires α = 0; use simulate_moran for resampling")
    space = spec.space
    x0 = np.asarray(x0, dtype=float)
    if np.any(x0 < space.x_min) or np.any(x0 > space.x_max):
        raise ValueError("x0 must lie in the grid interval")
    save, steps = _time_grid(T, dt, save_times)
    sizes = batches(n_reps, 256)
    out = []
    for size, rng in zip(sizes, spawn_generators(rng_seed, len(sizes))):
        pos = _initial_positions(space, x0, N, size, "quota", rng).astype(float)
        snaps = [pos.copy()]
        for seg in steps:
            for h in seg:
                pos = _euler_move(spec, pos, h, rng)
            snaps.append(pos.copy())
        out.append(np.stack(snaps))
    return ParticlePath(space, save, np.concatenate(out, axis=1))


# ---------------------------------------------------------------------------
# empirical moments


def empirical_measure(space: Space, positions: np.ndarray) -> np.ndarray:
    """Node weights of the empirical measure, one row per repetition.

    Grid positions are spread onto the two neighbouring nodes with hat-function
    weights, so ``<g, μ^k>`` equals the V-statistic of the multilinear
    interpolant of ``g``.
    """
    pos = np.atleast_2d(positions)
    reps, N = pos.shape
    w = np.zeros((reps, space.size))
    rows = np.repeat(np.arange(reps), N)
    if isinstance(space, FiniteSpace):
        np.add.at(w, (rows, pos.ravel().astype(int)), 1.0)
    else:
        f = np.clip((pos.ravel() - space.x_min) / space.h, 0.0, space.n - 1)
        i = np.minimum(np.floor(f).astype(int), space.n - 2)
        t = f - i
        np.add.at(w, (rows, i), 1.0 - t)
        np.add.at(w, (rows, i + 1), t)
    return w / N


def empirical_moments(space: Space, positions: np.ndarray, g: CoefficientTensor) -> np.ndarray:
    """``<g, X_N^k>`` for each row of ``positions``."""
    return weight_moments(empirical_measure(space, positions), g)


def weight_moments(w: np.ndarray, g: CoefficientTensor) -> np.ndarray:
    """``<g, μ^k>`` for each row of node weights ``w``."""
    w = np.atleast_2d(w)
    k = g.degree
    if k == 0:
        return np.full(w.shape[0], float(g.values))
    v = np.tensordot(w, g.values, axes=(1, 0))  # (reps, n, ..., n)
    for _ in range(k - 1):
        v = np.einsum("r...i,ri->r...", v, w)
    return v


def empirical_moment(ensemble: ParticleEnsemble, g: CoefficientTensor) -> float:
    """V-statistic ``(1/N^k) Σ_{i_1..i_k} g(Z^{i_1}, ..., Z^{i_k})``."""
    if g.space != ensemble.space:
        raise ValueError("ensemble and coefficient live on different spaces")
    return float(empirical_moments(ensemble.space, ensemble.positions[None, :], g)[0])


def empirical_u_moments(space: Space, positions: np.ndarray, g: CoefficientTensor) -> np.ndarray:
    """U-statistic ``(1/(N(N-1))) Σ_{i≠j} g(Z^i, Z^j)`` per row (k <= 2).

    Drops the self-pairs that the V-statistic includes; for Moran-type
    systems this is the unbiased estimator of the degree-2 moment.
    """
    if g.degree < 2:
        return empirical_moments(space, positions, g)
    if g.degree > 2:
        raise ValueError("U-statistics are implemented for k <= 2")
    pos = np.atleast_2d(positions)
    N = pos.shape[1]
    v = empirical_moments(space, pos, g)
    diag = np.zeros(pos.shape[0])
    for i in range(N):
        w = empirical_measure(space, pos[:, i:i + 1])
        diag += np.einsum("ri,ij,rj->r", w, g.values, w)
    return (N * N * v - diag) / (N * (N - 1))
