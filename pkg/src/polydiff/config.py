"""Experiment configuration documents and named presets."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .generator import MAX_DEGREE, MAX_STATES, GeneratorSpec, MemoryGuardError, spec_from_dict
from .measure_poly import (
    CoefficientTensor,
    DiscreteMeasure,
    FiniteSpace,
    GridSpace,
    Space,
    sym_tensor,
    symmetric_basis_size,
)
from .moments_grid import PideConfig

TASKS = ("moments", "simulate", "validate", "kkt")


class ConfigError(ValueError):
    """A configuration document could not be parsed or is inconsistent."""


@dataclass
class ExperimentConfig:
    task: str
    generator: GeneratorSpec
    g: CoefficientTensor | None
    k: int
    times: list[float]
    nu: DiscreteMeasure | None
    seed: int = 0
    paths: int = 10_000
    particles: int = 200
    reps: int = 200
    dt: float = 1e-3
    pide: PideConfig = field(default_factory=PideConfig)
    scenarios: list[Any] = field(default_factory=list)
    kkt: dict = field(default_factory=dict)
    x0: float | None = None
    name: str = "experiment"
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# functions on E


def _function(space: Space, doc, where: str) -> np.ndarray:
    """A degree-1 coefficient from an inline array or a named family."""
    if isinstance(doc, Mapping):
        x = space.nodes if isinstance(space, GridSpace) else np.arange(space.size, dtype=float)
        if "gaussian" in doc:
            p = doc["gaussian"]
            return np.exp(-((x - p.get("mean", 0.0)) ** 2) / (2 * p.get("sd", 1.0) ** 2))
        if "linear" in doc:
            p = doc["linear"]
            return p.get("slope", 1.0) * x + p.get("intercept", 0.0)
        if "tanh" in doc:
            p = doc["tanh"]
            return np.tanh(p.get("scale", 1.0) * (x - p.get("center", 0.0)))
        if "indicator" in doc:
            out = np.zeros(space.size)
            out[list(np.atleast_1d(doc["indicator"]))] = 1.0
            return out
        raise ConfigError(f"{where}: unknown function family {sorted(doc)}")
    arr = np.array(doc, dtype=float)
    if arr.shape != (space.size,):
        raise ConfigError(f"{where}: expected {space.size} values, got shape {arr.shape}")
    return arr


def hat_partition(space: GridSpace, count: int) -> list[np.ndarray]:
    """``count`` piecewise-linear hat functions on equally spaced centers; they sum to one."""
    x = space.nodes
    centers = np.linspace(space.x_min, space.x_max, count)
    width = centers[1] - centers[0]
    return [np.clip(1.0 - np.abs(x - c) / width, 0.0, None) for c in centers]


def _coefficient(space: Space, doc: Mapping, k: int) -> CoefficientTensor:
    if "indicator_distinct" in doc:
        if k != 2:
            raise ConfigError("g.indicator_distinct needs k = 2")
        return CoefficientTensor(space, 1.0 - np.eye(space.size))
    if "constant" in doc:
        return CoefficientTensor.constant(space, k, float(doc["constant"]))
    if "power" in doc:
        h = CoefficientTensor(space, _function(space, doc["power"], "g.power"))
        return CoefficientTensor.power(h, k)
    if "product" in doc:
        factors = [CoefficientTensor(space, _function(space, f, "g.product")) for f in doc["product"]]
        if len(factors) != k:
            raise ConfigError(f"g.product has {len(factors)} factors but k = {k}")
        out = factors[0]
        for f in factors[1:]:
            out = sym_tensor(out, f)
        return out
    if "tensor" in doc:
        try:
            return CoefficientTensor(space, np.array(doc["tensor"], dtype=float))
        except ValueError as exc:
            raise ConfigError(f"g.tensor: {exc}") from exc
    if "factor_quadratic" in doc:
        # q(Z) = Σ_ij c_ij Z^i Z^j with factor exposures Z^i = <g_i, X>
        p = doc["factor_quadratic"]
        if not isinstance(space, GridSpace) or k != 2:
            raise ConfigError("g.factor_quadratic needs a grid space and k = 2")
        basis = hat_partition(space, int(p["factors"]))
        c = np.array(p.get("weights", np.eye(len(basis))), dtype=float)
        vals = sum(c[i, j] * np.multiply.outer(basis[i], basis[j]) for i in range(len(basis)) for j in range(len(basis)))
        return CoefficientTensor(space, 0.5 * (vals + vals.T))
    raise ConfigError(f"g: unknown coefficient form {sorted(doc)}")


def _measure(space: Space, doc) -> DiscreteMeasure:
    if isinstance(doc, Mapping):
        if "dirac" in doc:
            i = doc["dirac"]
            if isinstance(space, GridSpace) and isinstance(i, float):
                i = int(np.argmin(np.abs(space.nodes - i)))
            return DiscreteMeasure.dirac(space, int(i))
        if doc.get("uniform"):
            return DiscreteMeasure.uniform(space)
        if "normal" in doc:
            w = _function(space, {"gaussian": doc["normal"]}, "nu.normal")
            return DiscreteMeasure(space, w / w.sum())
        raise ConfigError(f"nu: unknown measure form {sorted(doc)}")
    try:
        return DiscreteMeasure(space, doc)
    except ValueError as exc:
        raise ConfigError(f"nu: {exc}") from exc


def _check_size(space: Space, k: int) -> None:
    states = space.size**k
    if states > MAX_STATES:
        raise MemoryGuardError(
            f"k={k} on a space of size {space.size} needs {space.size}^{k} = {states} states "
            f"(cap {MAX_STATES}); symmetric basis N = C({k + space.size - 1},{k}) = "
            f"{symmetric_basis_size(space.size, k)}"
        )


def parse_config(doc: Mapping, base_dir: Path | None = None, task: str | None = None) -> ExperimentConfig:
    """Validate a configuration document and build its objects."""
    if not isinstance(doc, Mapping):
        raise ConfigError("configuration must be a JSON object")
    task = task or doc.get("task")
    if task not in TASKS:
        raise ConfigError(f"task: expected one of {', '.join(TASKS)}, got {task!r}")
    if "generator" not in doc:
        raise ConfigError("generator: missing")
    try:
        spec = spec_from_dict(doc["generator"], base_dir)
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise ConfigError(f"generator: {exc}") from exc
    k = int(doc.get("k", 2))
    if not 1 <= k <= MAX_DEGREE:
        raise ConfigError(f"k: must lie in 1..{MAX_DEGREE}, got {k}")
    seed = int(doc.get("seed", 0))
    if not 0 <= seed < 2**64:
        raise ConfigError("seed: must be a 64-bit unsigned integer")
    times = [float(t) for t in np.atleast_1d(doc.get("T", [1.0]))]
    if any(t < 0 for t in times) or times != sorted(times):
        raise ConfigError("T: times must be nonnegative and increasing")
    space = spec.space
    g = nu = None
    if "g" in doc:
        _check_size(space, k)
        g = _coefficient(space, doc["g"], k)
    if "nu" in doc:
        nu = _measure(space, doc["nu"])
    pide_doc = doc.get("pide", {})
    try:
        pide = PideConfig(**pide_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"pide: {exc}") from exc
    cfg = ExperimentConfig(
        task=task, generator=spec, g=g, k=k, times=times, nu=nu, seed=seed,
        paths=int(doc.get("paths", 10_000)), particles=int(doc.get("particles", 200)),
        reps=int(doc.get("reps", 200)), dt=float(doc.get("dt", 1e-3)), pide=pide,
        scenarios=list(doc.get("scenarios", [])), kkt=dict(doc.get("kkt", {})),
        x0=doc.get("x0"), name=str(doc.get("name", "experiment")), extras=dict(doc.get("extras", {})),
    )
    if cfg.task in ("moments", "simulate") and (cfg.g is None or cfg.nu is None):
        raise ConfigError(f"{cfg.task} needs both 'g' and 'nu'")
    return cfg


def load_config(path: str | Path, task: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_config(doc, path.parent, task)


# ---------------------------------------------------------------------------
# presets


def _taper(x: np.ndarray, half_width: float) -> np.ndarray:
    return 1.0 - (x / half_width) ** 2


def _preset_fleming_viot() -> dict:
    return {
        "name": "fleming-viot",
        "task": "moments",
        "generator": {"space": {"type": "finite", "d": 2}, "mutation": {"kernel": [[0, 0], [0, 0]]},
                      "alpha": {"constant": 1.0}},
        "k": 2,
        "g": {"indicator_distinct": True},
        "nu": [0.3, 0.7],
        "T": [0.25, 0.5, 1.0, 2.0],
        "scenarios": [{"id": "heterozygosity", "z": 0.3, "a0": 1.0, "T": 1.0}, {"id": "tower", "z": 0.3, "a0": 1.0, "T": 1.0}],
        "kkt": {"polynomials": 20, "max_degree": 3, "restarts": 5},
        "seed": 1,
    }


def _preset_heterozygosity() -> dict:
    doc = _preset_fleming_viot()
    doc.update(name="fleming-viot-heterozygosity", task="simulate", T=[0.25, 1.0],
               paths=10_000, dt=1e-3, particles=200, reps=200,
               scenarios=[{"id": "heterozygosity", "z": 0.3, "a0": 1.0, "T": 1.0}])
    return doc


def _preset_common_noise() -> dict:
    n, half = 101, 6.0
    tau = np.ones(n)
    tau[[0, -1]] = 0.0
    return {
        "name": "common-noise",
        "task": "moments",
        "generator": {"space": {"type": "grid", "x_min": -half, "x_max": half, "n": n},
                      "mutation": {"drift_diffusion": {"b": 0.0, "sigma": 0.0}},
                      "alpha": {"constant": 0.0}, "tau": tau.tolist()},
        "k": 2,
        "g": {"power": {"gaussian": {"mean": 0.0, "sd": 1.0}}},
        "nu": {"dirac": 0.0},
        "T": [0.5, 1.0],
        "particles": 500, "reps": 200, "dt": 1e-2,
        "scenarios": [{"id": "common-noise", "tau": 1.0, "T": 1.0}],
        "seed": 2,
    }


def _preset_factor_model() -> dict:
    n, half = 51, 3.0
    x = np.linspace(-half, half, n)
    sigma = 0.4 * _taper(x, half)
    tau = 0.3 * _taper(x, half)
    return {
        "name": "factor-model",
        "task": "moments",
        "generator": {"space": {"type": "grid", "x_min": -half, "x_max": half, "n": n},
                      "mutation": {"drift_diffusion": {"b": (-0.5 * x).tolist(), "sigma": sigma.tolist()}},
                      "alpha": {"constant": 0.5}, "tau": tau.tolist()},
        "k": 2,
        "g": {"factor_quadratic": {"factors": 5}},
        "nu": {"normal": {"mean": 0.0, "sd": 1.0}},
        "T": [0.5, 1.0],
        "particles": 100, "reps": 200, "dt": 5e-3,
        "scenarios": [{"id": "feynman-kac", "T": 1.0}, {"id": "grid-moran", "T": 0.5}],
        "extras": {"factors": 5},
        "seed": 3,
    }


PRESETS = {
    "fleming-viot": _preset_fleming_viot,
    "fleming-viot-heterozygosity": _preset_heterozygosity,
    "heterozygosity": _preset_heterozygosity,
    "common-noise": _preset_common_noise,
    "factor-model": _preset_factor_model,
}


def preset_document(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return copy.deepcopy(PRESETS[name]())


def preset(name: str, task: str | None = None) -> ExperimentConfig:
    return parse_config(preset_document(name), task=task)


def quick_overrides(cfg: ExperimentConfig) -> ExperimentConfig:
    """Smaller Monte Carlo budgets for CI runs."""
    cfg.paths = min(cfg.paths, 2000)
    cfg.reps = min(cfg.reps, 60)
    cfg.particles = min(cfg.particles, 100)
    cfg.kkt = {**cfg.kkt, "polynomials": min(int(cfg.kkt.get("polynomials", 20)), 10)}
    quick = []
    for sc in cfg.scenarios:
        sc = {"id": sc} if isinstance(sc, str) else dict(sc)
        for key, cap in (("paths", 2000), ("reps", 60), ("particles", 100)):
            sc[key] = min(sc.get(key, cap), cap)
        quick.append(sc)
    cfg.scenarios = quick
    return cfg


def cost_summary(cfg: ExperimentConfig) -> str:
    space, k = cfg.generator.space, cfg.k
    n = space.size
    if isinstance(space, FiniteSpace):
        return f"d={n} k={k} states d^k={n**k} symmetric basis N=C({k + n - 1},{k})={symmetric_basis_size(n, k)}"
    line = f"grid n={n} k={k} grid cost n^k={n**k}"
    factors = cfg.extras.get("factors")
    if factors:
        line += (f"; simplex alternative d={factors}: d^k={factors**k}, "
                 f"N=C({k + factors - 1},{k})={math.comb(k + factors - 1, k)}")
    return line
