"""Reproducible random streams and Monte Carlo summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BATCH_SIZE = 2048


def spawn_generators(seed: int, n: int) -> list[np.random.Generator]:
    """Independent generators split from a master seed.

    Stream ``i`` is ``Generator(PCG64(SeedSequence(seed).spawn(n)[i]))``; it
    depends only on ``(seed, i)``, so work can be farmed out in any order.
    """
    if not 0 <= int(seed) < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(int(seed)).spawn(n)]


def batches(n_items: int, batch_size: int = BATCH_SIZE) -> list[int]:
    full, rest = divmod(n_items, batch_size)
    return [batch_size] * full + ([rest] if rest else [])


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n: int

    @classmethod
    def from_samples(cls, samples) -> Estimate:
        x = np.asarray(samples, dtype=float).ravel()
        se = float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
        return cls(float(x.mean()), se, int(x.size))

    def zscore(self, target: float, bias_allowance: float = 0.0) -> float:
        """Standardized distance to ``target`` after forgiving ``bias_allowance``."""
        gap = max(abs(self.mean - target) - bias_allowance, 0.0)
        if self.stderr == 0.0:
            return 0.0 if gap == 0.0 else float("inf")
        return float(np.copysign(gap / self.stderr, self.mean - target))
