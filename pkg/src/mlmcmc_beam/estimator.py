"""Posterior estimates and chain diagnostics.

The multilevel estimate telescopes: the coarsest chain contributes the
plain mean of the quantity of interest, and each finer chain contributes
the mean difference between its own evaluation and the coarser level's
evaluation at the paired subsampled states.  Per-level burn-in is
dropped here, at estimation time, not during sampling.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pipeline import LevelModel
from .sampler import ChainSet


def autocovariance(series: np.ndarray) -> np.ndarray:
    """Biased autocovariance at all lags, FFT-accelerated."""
    x = np.asarray(series, dtype=float)
    n = x.size
    x = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n]
    return acov / n


def iat(series: np.ndarray) -> float:
    """Integrated autocorrelation time via the initial-positive-sequence rule.

    Adjacent-lag autocorrelations are paired, the sum is truncated at the
    first non-positive pair, and the result is 2 * (kept sum) - 1.  Near 1
    for white noise, larger for sticky chains.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"series must be 1-d, got shape {x.shape}")
    if x.size < 100:
        raise ValueError(f"need at least 100 samples for an IAT, got {x.size}")
    if np.max(x) == np.min(x):
        raise ValueError("series is constant; IAT is undefined")
    acov = autocovariance(x)
    if acov[0] <= 0.0 or not np.isfinite(acov[0]):
        raise ValueError("series has no usable variance; IAT is undefined")
    rho = acov / acov[0]
    n_pairs = rho.size // 2
    pair_sums = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    total = 0.0
    for g in pair_sums:
        if g <= 0.0:
            break
        total += g
    return 2.0 * total - 1.0


def effective_sample_size(series: np.ndarray) -> float:
    return len(series) / iat(series)


@dataclass
class TelescopicEstimate:
    value: float
    level_terms: list[float]          # coarse mean, then correction means
    n_used: list[int]                 # post-burn-in sample counts
    variance_of_mean: float           # IAT-adjusted, summed over levels

    @property
    def standard_error(self) -> float:
        return math.sqrt(self.variance_of_mean)


def _level_series(chains: ChainSet, models: list[LevelModel], level: int,
                  discard_burn_in: bool = True) -> np.ndarray:
    """Per-step estimator contributions for one level (Q or Q-difference)."""
    lc = chains.levels[level]
    start = chains.configs[level].burn_in if discard_burn_in else 0
    if lc.n_steps <= start:
        raise ValueError(
            f"level {level} has {lc.n_steps} steps, not more than its "
            f"burn-in {start}")
    own = models[level].qoi_batch(lc.samples[start:])
    if level == 0:
        return own
    paired = models[level - 1].qoi_batch(lc.paired_coarse[start:])
    return own - paired


def telescopic_estimate(chains: ChainSet,
                        models: list[LevelModel] | None = None) -> TelescopicEstimate:
    """Multilevel posterior mean of the region-average stiffness."""
    if models is None:
        models = chains.models
    if models is None:
        raise ValueError("chain set carries no models; pass them explicitly")
    terms, counts, var_mean = [], [], 0.0
    for level in range(chains.n_levels):
        series = _level_series(chains, models, level)
        terms.append(float(series.mean()))
        counts.append(series.size)
        var = float(series.var(ddof=1)) if series.size > 1 else 0.0
        if var > 0.0:
            try:
                tau = max(iat(series), 1.0)
            except ValueError:
                tau = 1.0
            var_mean += var * tau / series.size
    return TelescopicEstimate(
        value=float(sum(terms)),
        level_terms=terms,
        n_used=counts,
        variance_of_mean=var_mean,
    )


@dataclass
class LevelStats:
    level: int
    m_trunc: int
    nx: int
    ny: int
    n_steps: int
    n_used: int
    rejection_rate: float
    mean_term: float          # mean Q (level 0) or mean Q-difference
    var_term: float
    var_qoi: float            # variance of this level's own Q series
    iat_qoi: float
    mean_step_seconds: float
    solve_seconds: float
    compare_seconds: float
    n_evaluations: int
    n_forward_failures: int


def level_statistics(chains: ChainSet,
                     models: list[LevelModel] | None = None) -> list[LevelStats]:
    if models is None:
        models = chains.models
    if models is None:
        raise ValueError("chain set carries no models; pass them explicitly")
    out = []
    for level in range(chains.n_levels):
        lc = chains.levels[level]
        cfg = chains.configs[level]
        series = _level_series(chains, models, level)
        q_own = models[level].qoi_batch(lc.samples[cfg.burn_in:])
        try:
            tau = iat(q_own)
        except ValueError:
            tau = float("nan")
        out.append(LevelStats(
            level=level,
            m_trunc=lc.m_trunc,
            nx=cfg.nx,
            ny=cfg.ny,
            n_steps=lc.n_steps,
            n_used=series.size,
            rejection_rate=lc.rejection_rate,
            mean_term=float(series.mean()),
            var_term=float(series.var(ddof=1)) if series.size > 1 else 0.0,
            var_qoi=float(q_own.var(ddof=1)) if q_own.size > 1 else 0.0,
            iat_qoi=tau,
            mean_step_seconds=lc.step_seconds / lc.n_steps if lc.n_steps else 0.0,
            solve_seconds=lc.solve_seconds,
            compare_seconds=lc.compare_seconds,
            n_evaluations=lc.n_evaluations,
            n_forward_failures=lc.n_forward_failures,
        ))
    return out


_STATS_FIELDS = [
    "level", "m_trunc", "nx", "ny", "n_steps", "n_used", "rejection_rate",
    "mean_term", "var_term", "var_qoi", "iat_qoi", "mean_step_seconds",
    "solve_seconds", "compare_seconds", "n_evaluations", "n_forward_failures",
]


def write_level_stats_csv(stats_per_replicate: list[list[LevelStats]],
                          path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replicate"] + _STATS_FIELDS)
        for rep, stats in enumerate(stats_per_replicate):
            for s in stats:
                writer.writerow([rep] + [repr(getattr(s, f)) if isinstance(
                    getattr(s, f), float) else getattr(s, f)
                    for f in _STATS_FIELDS])


def combine_replicates(estimates: list[TelescopicEstimate]) -> dict:
    """Pool replicate estimates; spread-based error when possible."""
    if not estimates:
        raise ValueError("no estimates to combine")
    values = np.array([e.value for e in estimates])
    value = float(values.mean())
    if len(estimates) >= 2:
        se = float(values.std(ddof=1) / math.sqrt(len(estimates)))
        method = "replicate_spread"
    else:
        se = estimates[0].standard_error
        method = "iat_adjusted"
    n_levels = len(estimates[0].level_terms)
    terms = [float(np.mean([e.level_terms[l] for e in estimates]))
             for l in range(n_levels)]
    return {
        "value": value,
        "standard_error": se,
        "error_method": method,
        "replicates": len(estimates),
        "level_terms": terms,
        "per_replicate": [e.value for e in estimates],
    }


def write_estimate_json(summary: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
