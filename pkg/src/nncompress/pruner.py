"""Magnitude pruning against a percentile threshold.

For a compression factor ``f`` the threshold is the nearest-rank
``100 * (1 - 1/f)``-th percentile of ``|w|``; weights strictly below it are
zeroed. Ties at the threshold survive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, NonFiniteWeight, OutOfRange


@dataclass(frozen=True, eq=False)
class PruneResult:
    mask: np.ndarray  # bool, one per weight, True = kept
    kept_values: np.ndarray
    threshold: np.float32
    shape: tuple[int, ...]

    @property
    def n_kept(self) -> int:
        return int(self.kept_values.size)

    @property
    def n_pruned(self) -> int:
        return int(self.mask.size - self.kept_values.size)

    def dense(self) -> np.ndarray:
        """The pruned tensor with zeros at removed positions."""
        out = np.zeros(self.mask.size, dtype=np.float32)
        out[self.mask] = self.kept_values
        return out.reshape(self.shape)


def prune_percentile(factor: float) -> float:
    if not factor >= 1:
        raise OutOfRange(f"prune factor must be >= 1, got {factor!r}")
    return 100.0 * (1.0 - 1.0 / factor)


def threshold_rank(n: int, factor: float) -> int:
    """1-based nearest-rank position of the threshold among n sorted magnitudes.

    ``ceil(p/100 * n)`` clamped to [1, n]. The product is snapped to the
    nearest integer when it is within rounding noise of one, so that e.g.
    f=3 on n=3m lands on rank 2m rather than 2m+1.
    """
    x = (1.0 - 1.0 / factor) * n
    nearest = round(x)
    if abs(x - nearest) <= 1e-9 * max(1.0, x):
        x = nearest
    return min(max(int(math.ceil(x)), 1), n)


def expected_kept(n: int, factor: float) -> int:
    """Survivor count of ``prune_layer`` when all magnitudes are distinct."""
    prune_percentile(factor)
    if n == 0:
        return 0
    return n - threshold_rank(n, factor) + 1


def prune_layer(weights, factor: float) -> PruneResult:
    """Zero every weight whose magnitude is below the factor's percentile.

    Zeros already present (e.g. from an earlier prune) stay in the
    percentile population; they are the smallest magnitudes, so pruning a
    pruned layer again with the same factor changes nothing.
    """
    prune_percentile(factor)
    arr = np.asarray(weights, dtype=np.float32)
    flat = arr.ravel()
    if flat.size == 0:
        raise EmptyInput("cannot prune an empty tensor")
    if not np.all(np.isfinite(flat)):
        raise NonFiniteWeight("weights contain NaN or Inf")
    mags = np.abs(flat)
    rank = threshold_rank(flat.size, factor)
    threshold = np.partition(mags, rank - 1)[rank - 1]
    mask = ~(mags < threshold)
    return PruneResult(mask, flat[mask].copy(), np.float32(threshold), arr.shape)
