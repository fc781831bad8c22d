"""Noise schedules, the blended forward process, and reverse steppers.

The forward process mixes the ground truth with the upsampled coarse guess
before noising, so finer-level denoisers learn to deblur as well as
denoise. Samplers consume clean-grid (x0) predictions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TopologyMismatch
from .grid import SparseGrid

BETA_MIN = 1e-4
BETA_MAX = 2e-2
DDIM_STRIDE = 10  # 10 uniform steps per 100 timesteps


@dataclass(frozen=True)
class ScheduleTable:
    """Precomputed alpha-bar and gamma sequences plus per-level start steps."""

    T: int
    alpha_bar: np.ndarray  # (T+1,), alpha_bar[0] = 1, strictly decreasing
    gamma: np.ndarray  # (T+1,), 1 at 0, 0 at T, non-increasing
    per_level_start: tuple[int, ...]


def make_schedule(
    T: int,
    levels: int,
    beta_min: float = BETA_MIN,
    beta_max: float = BETA_MAX,
    finer_start: int = 300,
) -> ScheduleTable:
    """Linear-beta schedule with gamma(t) = 1 - t/T."""
    if T < 2:
        raise ValueError("T must be >= 2")
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    gamma = 1.0 - np.arange(T + 1, dtype=np.float64) / T
    starts = (T,) + (min(finer_start, T),) * (levels - 1)
    return ScheduleTable(T, alpha_bar, gamma, starts)


def forward_mix(
    gt: SparseGrid,
    upsampled: SparseGrid | None,
    t: int,
    noise: np.ndarray,
    schedule: ScheduleTable,
) -> SparseGrid:
    """sqrt(ab)*(gamma*gt + (1-gamma)*upsampled) + sqrt(1-ab)*noise.

    At the coarsest level `upsampled` is None and the mix reduces to gt.
    All 10 channels are treated alike, mask included.
    """
    if upsampled is not None:
        if upsampled.level != gt.level or not np.array_equal(
            upsampled.coords, gt.coords
        ):
            raise TopologyMismatch("gt and upsampled grids must share topology")
    ab = schedule.alpha_bar[t]
    g = schedule.gamma[t]
    mix = gt.features.astype(np.float64)
    if upsampled is not None:
        mix = g * mix + (1.0 - g) * upsampled.features.astype(np.float64)
    out = np.sqrt(ab) * mix
    if t > 0:
        out = out + np.sqrt(1.0 - ab) * np.asarray(noise, dtype=np.float64)
    return gt.with_features(out.astype(gt.features.dtype))


def renoise(grid: SparseGrid, t: int, noise: np.ndarray, schedule: ScheduleTable):
    """Corrupt an upsampled guess up to step t before reverse sampling."""
    ab = schedule.alpha_bar[t]
    out = np.sqrt(ab) * grid.features + np.sqrt(1.0 - ab) * noise.astype(
        grid.features.dtype
    )
    return grid.with_features(out)


def ddpm_step(
    model_output: SparseGrid,
    noisy: SparseGrid,
    t: int,
    fresh_noise: np.ndarray | None,
    schedule: ScheduleTable,
) -> SparseGrid:
    """x0-parameterized ancestral step; deterministic at t = 1."""
    ab = schedule.alpha_bar
    a_t = ab[t] / ab[t - 1]
    b_t = 1.0 - a_t
    x0 = model_output.features.astype(np.float64)
    xt = noisy.features.astype(np.float64)
    mean = (np.sqrt(ab[t - 1]) * b_t / (1.0 - ab[t])) * x0 + (
        np.sqrt(a_t) * (1.0 - ab[t - 1]) / (1.0 - ab[t])
    ) * xt
    if t > 1:
        var = b_t * (1.0 - ab[t - 1]) / (1.0 - ab[t])
        mean = mean + np.sqrt(var) * np.asarray(fresh_noise, dtype=np.float64)
    return noisy.with_features(mean.astype(noisy.features.dtype))


def ddim_step(
    model_output: SparseGrid,
    noisy: SparseGrid,
    t: int,
    t_prev: int,
    schedule: ScheduleTable,
) -> SparseGrid:
    """Deterministic (eta = 0) DDIM update from t to t_prev."""
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got {t} -> {t_prev}")
    ab = schedule.alpha_bar
    x0 = model_output.features.astype(np.float64)
    xt = noisy.features.astype(np.float64)
    eps = (xt - np.sqrt(ab[t]) * x0) / np.sqrt(1.0 - ab[t])
    out = np.sqrt(ab[t_prev]) * x0 + np.sqrt(1.0 - ab[t_prev]) * eps
    return noisy.with_features(out.astype(noisy.features.dtype))


def ddim_times(t_start: int, stride: int = DDIM_STRIDE) -> list[tuple[int, int]]:
    """(t, t_prev) pairs from t_start down to 0 with a uniform stride."""
    ts = list(range(t_start, 0, -stride))
    return [(t, max(t - stride, 0)) for t in ts]
