"""Interquartile mean and percentile-bootstrap confidence intervals."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def iqm(samples: Sequence[float] | np.ndarray) -> float:
    """Mean of the sorted samples after dropping ``n // 4`` from each end."""
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if n < 4:
        raise ValueError(f"IQM needs at least 4 samples, got {n}")
    k = n // 4
    return float(np.mean(x[k : n - k]))


def bootstrap_ci(
    samples: Sequence[float] | np.ndarray,
    statistic: Callable[[np.ndarray], float] = iqm,
    resamples: int = 10_000,
    level: float = 0.95,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """Percentile bootstrap: resample with replacement, reduce, take the central ``level`` band."""
    if resamples < 1000:
        raise ValueError("use at least 1000 bootstrap resamples")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("no samples")
    rng = np.random.default_rng(0) if rng is None else rng
    idx = rng.integers(0, x.size, size=(resamples, x.size))
    stats = np.array([statistic(x[row]) for row in idx])
    lo, hi = np.percentile(stats, [50.0 * (1.0 - level), 50.0 * (1.0 + level)])
    return float(lo), float(hi)
