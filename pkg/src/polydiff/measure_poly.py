"""Polynomials of probability measures on finite spaces and uniform grids.

A monomial is ``<g, nu^k>``, the integral of a symmetric coefficient ``g`` on
``E^k`` against the k-fold product of ``nu``.  Both ``E = {0, ..., d-1}`` and a
uniform grid on ``[x_min, x_max]`` are represented by their points, so every
coefficient is a dense array of shape ``(size,) * k`` and every measure is a
weight vector.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Union

import numpy as np

SYMMETRY_TOL = 1e-9
NEGATIVE_WEIGHT_TOL = 1e-12
MASS_TOL = 1e-10


class SpaceMismatchError(ValueError):
    """Objects defined on different underlying spaces were combined."""


# ---------------------------------------------------------------------------
# spaces


@dataclass(frozen=True)
class FiniteSpace:
    """``E = {0, ..., d-1}``."""

    d: int

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"finite space needs d >= 1, got {self.d!r}")

    @property
    def size(self) -> int:
        return self.d

    @property
    def kind(self) -> str:
        return "finite"

    def to_dict(self) -> dict:
        return {"type": "finite", "d": self.d}


@dataclass(frozen=True)
class GridSpace:
    """Uniform grid with ``n`` nodes on ``[x_min, x_max]``."""

    x_min: float
    x_max: float
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 3:
            raise ValueError(f"grid needs n >= 3 nodes, got {self.n!r}")
        if not self.x_min < self.x_max:
            raise ValueError(f"grid needs x_min < x_max, got [{self.x_min}, {self.x_max}]")

    @property
    def size(self) -> int:
        return self.n

    @property
    def kind(self) -> str:
        return "grid"

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n)

    def to_dict(self) -> dict:
        return {"type": "grid", "x_min": self.x_min, "x_max": self.x_max, "n": self.n}


Space = Union[FiniteSpace, GridSpace]


def space_from_dict(doc: Mapping) -> Space:
    kind = doc.get("type")
    if kind == "finite":
        return FiniteSpace(int(doc["d"]))
    if kind == "grid":
        return GridSpace(float(doc["x_min"]), float(doc["x_max"]), int(doc["n"]))
    raise ValueError(f"unknown space type {kind!r}; expected 'finite' or 'grid'")


def _check_same_space(*objs) -> Space:
    space = objs[0].space
    for obj in objs[1:]:
        if obj.space != space:
            raise SpaceMismatchError(f"space mismatch: {space} vs {obj.space}")
    return space


def symmetric_basis_size(d: int, k: int) -> int:
    """Number of multi-indices of order ``k`` in ``d`` variables, ``C(k+d-1, k)``."""
    return math.comb(k + d - 1, k)


def symmetric_index_map(d: int, k: int) -> dict[tuple[int, ...], int]:
    """Map sorted index tuples of ``E^k`` to positions in the compressed basis."""
    return {c: i for i, c in enumerate(itertools.combinations_with_replacement(range(d), k))}


# ---------------------------------------------------------------------------
# tensors


def symmetrize(values: np.ndarray) -> np.ndarray:
    """Average an array over all permutations of its axes."""
    k = values.ndim
    if k < 2:
        return np.array(values, dtype=float)
    out = np.zeros_like(values, dtype=float)
    perms = list(itertools.permutations(range(k)))
    for perm in perms:
        out += np.transpose(values, perm)
    out /= len(perms)
    # summation order differs between entries; copy from the sorted index so
    # the result is symmetric bit for bit
    idx = np.sort(np.indices(out.shape).reshape(k, -1), axis=0)
    return out[tuple(idx)].reshape(out.shape)


def asymmetry(values: np.ndarray) -> float:
    """Largest deviation of an array under a swap of two adjacent axes.

    Adjacent transpositions generate the symmetric group, so zero here means
    full permutation invariance.
    """
    worst = 0.0
    for i in range(values.ndim - 1):
        swapped = np.swapaxes(values, i, i + 1)
        worst = max(worst, float(np.max(np.abs(values - swapped), initial=0.0)))
    return worst


@dataclass(frozen=True, eq=False)
class CoefficientTensor:
    """Symmetric coefficient ``g`` on ``E^k`` stored as a dense array.

    ``slot_derivative`` optionally holds the analytic derivative of ``g`` with
    respect to its first argument (grid spaces only).  Inputs whose asymmetry
    exceeds ``SYMMETRY_TOL`` are rejected; smaller deviations are averaged out.
    """

    space: Space
    values: np.ndarray
    slot_derivative: np.ndarray | None = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        n = self.space.size
        if vals.shape != (n,) * vals.ndim:
            raise ValueError(f"tensor shape {vals.shape} does not match space of size {n}")
        dev = asymmetry(vals)
        if dev > SYMMETRY_TOL:
            raise ValueError(f"coefficient is not symmetric (max deviation {dev:.3g})")
        if dev > 0.0:
            vals = symmetrize(vals)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if self.slot_derivative is not None:
            if not isinstance(self.space, GridSpace):
                raise ValueError("slot derivatives are only meaningful on a grid")
            der = np.array(self.slot_derivative, dtype=float)
            if der.shape != vals.shape or vals.ndim == 0:
                raise ValueError("slot derivative must have the tensor's shape")
            der.setflags(write=False)
            object.__setattr__(self, "slot_derivative", der)

    @property
    def degree(self) -> int:
        return self.values.ndim

    @classmethod
    def constant(cls, space: Space, k: int, c: float = 1.0) -> CoefficientTensor:
        return cls(space, np.full((space.size,) * k, float(c)))

    @classmethod
    def zeros(cls, space: Space, k: int) -> CoefficientTensor:
        return cls.constant(space, k, 0.0)

    @classmethod
    def from_function(cls, space: Space, h) -> CoefficientTensor:
        """Degree-1 coefficient sampled from an array or a callable on the grid nodes."""
        if callable(h):
            pts = space.nodes if isinstance(space, GridSpace) else np.arange(space.size)
            h = h(pts)
        return cls(space, np.asarray(h, dtype=float))

    @classmethod
    def power(cls, h: CoefficientTensor, k: int) -> CoefficientTensor:
        """``h ⊗ ... ⊗ h`` (k factors) for a degree-1 ``h``."""
        if h.degree != 1:
            raise ValueError("power needs a degree-1 coefficient")
        out = np.array(1.0)
        for _ in range(k):
            out = np.multiply.outer(out, h.values)
        return cls(h.space, out)

    def __add__(self, other: CoefficientTensor) -> CoefficientTensor:
        _check_same_space(self, other)
        if other.degree != self.degree:
            raise ValueError("cannot add tensors of different degree")
        return CoefficientTensor(self.space, self.values + other.values)

    def __sub__(self, other: CoefficientTensor) -> CoefficientTensor:
        return self + other.scale(-1.0)

    def scale(self, c: float) -> CoefficientTensor:
        der = None if self.slot_derivative is None else c * self.slot_derivative
        return CoefficientTensor(self.space, c * self.values, der)

    def is_zero(self, tol: float = 0.0) -> bool:
        return bool(np.max(np.abs(self.values), initial=0.0) <= tol)

    # serialization -------------------------------------------------------

    def header(self) -> dict:
        return {"space": self.space.to_dict(), "k": self.degree, "shape": list(self.values.shape),
                "dtype": "float64", "order": "C"}

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        """Write ``stem.bin`` (row-major float64) and ``stem.json`` (header)."""
        stem = Path(stem)
        bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
        np.ascontiguousarray(self.values, dtype="<f8").tofile(bin_path)
        json_path.write_text(json.dumps(self.header(), indent=2) + "\n")
        return bin_path, json_path

    @classmethod
    def load(cls, stem: str | Path) -> CoefficientTensor:
        stem = Path(stem)
        header = json.loads(stem.with_suffix(".json").read_text())
        space = space_from_dict(header["space"])
        flat = np.fromfile(stem.with_suffix(".bin"), dtype="<f8")
        shape = tuple(header["shape"])
        if flat.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError("binary block size does not match header shape")
        return cls(space, flat.reshape(shape))

    def to_csv(self, path: str | Path) -> Path:
        """CSV export for k <= 2: columns are point coordinates then value."""
        if self.degree > 2:
            raise ValueError("CSV export supports k <= 2")
        coords = self.space.nodes if isinstance(self.space, GridSpace) else np.arange(self.space.size)
        names = ["x", "y"][: self.degree]
        lines = [",".join(names + ["value"])]
        for idx in itertools.product(range(self.space.size), repeat=self.degree):
            cells = [repr(float(coords[i])) if isinstance(self.space, GridSpace) else str(i) for i in idx]
            lines.append(",".join(cells + [repr(float(self.values[idx]))]))
        path = Path(path)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def sym_tensor(g: CoefficientTensor, h: CoefficientTensor) -> CoefficientTensor:
    """Symmetric tensor product ``g ⊗ h`` of degree ``k + l``.

    Since ``g`` and ``h`` are already symmetric, averaging the outer product over
    the ``C(k+l, k)`` ways of placing g's slots is the full permutation average.
    """
    space = _check_same_space(g, h)
    k, l = g.degree, h.degree
    outer = np.multiply.outer(g.values, h.values)
    if k == 0 or l == 0:
        return CoefficientTensor(space, outer)
    n = k + l
    acc = np.zeros_like(outer)
    count = 0
    for slots in itertools.combinations(range(n), k):
        rest = [i for i in range(n) if i not in slots]
        # axis j of outer goes to position dest[j]
        dest = list(slots) + rest
        acc += np.moveaxis(outer, list(range(n)), dest)
        count += 1
    return CoefficientTensor(space, acc / count)


def _contract(values: np.ndarray, weights: np.ndarray, times: int) -> np.ndarray:
    """Contract the last ``times`` axes of ``values`` against ``weights``."""
    out = values
    for _ in range(times):
        out = out @ weights
    return out


# ---------------------------------------------------------------------------
# measures


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weights on the points of a finite space or on grid nodes.

    With ``signed=False`` (default) weights must be nonnegative up to 1e-12
    (tiny negatives are clamped) and sum to one within 1e-10.  Signed measures
    skip both checks and carry their total mass.
    """

    space: Space
    weights: np.ndarray
    signed: bool = False

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.shape != (self.space.size,):
            raise ValueError(f"weights of shape {w.shape} do not match space of size {self.space.size}")
        if not self.signed:
            if np.any(w < -NEGATIVE_WEIGHT_TOL):
                raise ValueError("probability weights must be nonnegative")
            w = np.maximum(w, 0.0)
            if abs(w.sum() - 1.0) > MASS_TOL:
                raise ValueError(f"probability weights sum to {w.sum()!r}, expected 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    @classmethod
    def dirac(cls, space: Space, i: int) -> DiscreteMeasure:
        w = np.zeros(space.size)
        w[i] = 1.0
        return cls(space, w)

    @classmethod
    def uniform(cls, space: Space) -> DiscreteMeasure:
        return cls(space, np.full(space.size, 1.0 / space.size))

    def __add__(self, other: DiscreteMeasure) -> DiscreteMeasure:
        _check_same_space(self, other)
        return DiscreteMeasure(self.space, self.weights + other.weights, signed=True)

    def __sub__(self, other: DiscreteMeasure) -> DiscreteMeasure:
        _check_same_space(self, other)
        return DiscreteMeasure(self.space, self.weights - other.weights, signed=True)

    def scale(self, c: float) -> DiscreteMeasure:
        return DiscreteMeasure(self.space, c * self.weights, signed=True)


def signed_measure(space: Space, weights) -> DiscreteMeasure:
    return DiscreteMeasure(space, weights, signed=True)


def eval_monomial(g: CoefficientTensor, nu: DiscreteMeasure) -> float:
    """``<g, nu^k>``."""
    _check_same_space(g, nu)
    return float(_contract(g.values, nu.weights, g.degree))


# ---------------------------------------------------------------------------
# polynomials


@dataclass(frozen=True, eq=False)
class MeasurePolynomial:
    """``p(nu) = sum_k <g_k, nu^k>`` with at most one coefficient per degree."""

    space: Space
    terms: Mapping[int, CoefficientTensor] = field(default_factory=dict)

    def __post_init__(self):
        terms = {}
        for k, g in dict(self.terms).items():
            if g.space != self.space:
                raise SpaceMismatchError(f"term of degree {k} lives on {g.space}, not {self.space}")
            if g.degree != k:
                raise ValueError(f"term keyed {k} has degree {g.degree}")
            terms[int(k)] = g
        object.__setattr__(self, "terms", dict(sorted(terms.items())))

    @classmethod
    def from_terms(cls, terms: Iterable[CoefficientTensor], space: Space | None = None) -> MeasurePolynomial:
        """Build from tensors, summing those that share a degree."""
        terms = list(terms)
        if space is None:
            if not terms:
                raise ValueError("need a space for the zero polynomial")
            space = terms[0].space
        merged: dict[int, CoefficientTensor] = {}
        for g in terms:
            merged[g.degree] = merged[g.degree] + g if g.degree in merged else g
        return cls(space, merged)

    @classmethod
    def constant(cls, space: Space, c: float) -> MeasurePolynomial:
        return cls(space, {0: CoefficientTensor.constant(space, 0, c)})

    @classmethod
    def monomial(cls, g: CoefficientTensor) -> MeasurePolynomial:
        return cls(g.space, {g.degree: g})

    @property
    def degree(self) -> int:
        """Largest degree with a nonzero coefficient; -1 for the zero polynomial."""
        nonzero = [k for k, g in self.terms.items() if not g.is_zero()]
        return max(nonzero) if nonzero else -1

    def __call__(self, nu: DiscreteMeasure) -> float:
        return eval_polynomial(self, nu)

    def __add__(self, other: MeasurePolynomial) -> MeasurePolynomial:
        _check_same_space(self, other)
        return MeasurePolynomial.from_terms([*self.terms.values(), *other.terms.values()], self.space)

    def __sub__(self, other: MeasurePolynomial) -> MeasurePolynomial:
        return self + other.scale(-1.0)

    def __mul__(self, other: MeasurePolynomial) -> MeasurePolynomial:
        return poly_product(self, other)

    def scale(self, c: float) -> MeasurePolynomial:
        return MeasurePolynomial(self.space, {k: g.scale(c) for k, g in self.terms.items()})


def eval_polynomial(p: MeasurePolynomial, nu: DiscreteMeasure) -> float:
    _check_same_space(p, nu)
    return float(sum(eval_monomial(g, nu) for g in p.terms.values()))


def poly_product(p: MeasurePolynomial, q: MeasurePolynomial) -> MeasurePolynomial:
    space = _check_same_space(p, q)
    return MeasurePolynomial.from_terms(
        [sym_tensor(g, h) for g in p.terms.values() for h in q.terms.values()], space
    )


def derivative_tensor(p: MeasurePolynomial, nu: DiscreteMeasure, order: int) -> np.ndarray:
    """``∂^order p(nu)`` as an array on ``E^order``.

    For a monomial of degree k this is ``k!/(k-order)! <g(x_1..x_order, ·), nu^(k-order)>``.
    """
    space = _check_same_space(p, nu)
    out = np.zeros((space.size,) * order)
    for k, g in p.terms.items():
        if k < order:
            continue
        factor = math.perm(k, order)
        out = out + factor * _contract(g.values, nu.weights, k - order)
    return out


def partial_derivative(p: MeasurePolynomial, nu: DiscreteMeasure) -> np.ndarray:
    """The map ``x -> ∂_x p(nu)``."""
    return derivative_tensor(p, nu, 1)


def second_derivative(p: MeasurePolynomial, nu: DiscreteMeasure) -> CoefficientTensor:
    return CoefficientTensor(p.space, derivative_tensor(p, nu, 2))


def ones_power(g: CoefficientTensor, j: int) -> CoefficientTensor:
    """``g ⊗ 1^{⊗j}``."""
    if j == 0:
        return g
    return sym_tensor(g, CoefficientTensor.constant(g.space, j))


def homogenize(p: MeasurePolynomial, m: int) -> CoefficientTensor:
    """Degree-``m`` coefficient agreeing with ``p`` on probability measures."""
    if m < max(p.degree, 0):
        raise ValueError(f"cannot homogenize a degree-{p.degree} polynomial to degree {m}")
    out = CoefficientTensor.zeros(p.space, m)
    for k, g in p.terms.items():
        if k > m:
            if not g.is_zero():
                raise ValueError(f"nonzero term of degree {k} exceeds target degree {m}")
            continue
        out = out + ones_power(g, m - k)
    return out


def psi(g: CoefficientTensor) -> CoefficientTensor:
    """Exchange form ``½(g(x,x) + g(y,y) - 2g(x,y))``."""
    if g.degree != 2:
        raise ValueError("psi acts on degree-2 coefficients")
    diag = np.diag(g.values)
    return CoefficientTensor(g.space, 0.5 * (diag[:, None] + diag[None, :] - 2.0 * g.values))


def taylor_eval(p: MeasurePolynomial, nu: DiscreteMeasure, mu: DiscreteMeasure) -> float:
    """``sum_l 1/l! <∂^l p(nu), mu^l>``, which equals ``p(nu + mu)``."""
    _check_same_space(p, nu, mu)
    total = 0.0
    for order in range(max(p.degree, 0) + 1):
        d = derivative_tensor(p, nu, order)
        total += float(_contract(d, mu.weights, order)) / math.factorial(order)
    return total
