"""Noise schedule, signal scaling, forward corruption, and DDIM stepping.

The diffusion state is a pair of matrices (per-candidate sizes and class-label
distributions) living in "scaled space": [0, 1] values mapped affinely to
[-scale, scale]. Randomness always comes from the caller, so everything here
is pure and deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COSINE_S = 0.008
MAX_BETA = 0.999


def cosine_alpha_bar(t: float, T: int, s: float = COSINE_S) -> float:
    """Cosine-schedule cumulative retention at timestep t (no beta clipping)."""
    if not 0 <= t <= T:
        raise ValueError(f"t must be in [0, {T}], got {t}")

    def f(u):
        return math.cos((u / T + s) / (1 + s) * math.pi / 2.0) ** 2

    return f(t) / f(0)


@dataclass
class NoiseSchedule:
    """Precomputed alpha-bar table over T timesteps.

    alpha_bar[0] == 1 by convention ("clean"); betas are clipped at 0.999 so
    alpha_bar stays strictly positive and strictly decreasing.
    """

    T: int = 1000
    s: float = COSINE_S

    def __post_init__(self):
        raw = np.array([cosine_alpha_bar(t, self.T, self.s) for t in range(self.T + 1)])
        betas = 1.0 - raw[1:] / raw[:-1]
        self.beta = np.clip(betas, 0.0, MAX_BETA)
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.concatenate(([1.0], np.cumprod(self.alpha)))

    def abar(self, t: int) -> float:
        """alpha_bar with the convention abar(-1) == 1 (fully denoised)."""
        if t == -1:
            return 1.0
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [-1, {self.T}]")
        return float(self.alpha_bar[t])


@dataclass
class ScalingConfig:
    """Signal scaling factors for the size and label channels."""

    size_scale: float = 4.0
    label_scale: float = 4.0

    def __post_init__(self):
        if self.size_scale <= 0 or self.label_scale <= 0:
            raise ValueError("scales must be positive")


@dataclass
class DiffusionState:
    """Scaled noisy sizes/labels for N_b candidates at timestep t.

    t == -1 denotes the fully denoised state.
    """

    sizes_t: np.ndarray
    labels_t: np.ndarray
    t: int

    def __post_init__(self):
        if self.sizes_t.shape[0] != self.labels_t.shape[0]:
            raise ValueError("sizes_t and labels_t must have equal row counts")


def scale_signal(x, scale: float):
    """Map [0, 1] values to [-scale, scale]."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    return (np.asarray(x, dtype=np.float64) * 2.0 - 1.0) * scale


def unscale_signal(x, scale: float):
    """Inverse of scale_signal; clamps input to [-scale, scale] first."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    clamped = np.clip(np.asarray(x, dtype=np.float64), -scale, scale)
    return (clamped / scale + 1.0) / 2.0


def corrupt(x0: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward corruption: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs noise {noise.shape}")
    abar = schedule.abar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * noise


def ddim_update(
    x_t: np.ndarray,
    x0_hat: np.ndarray,
    t_cur: int,
    t_next: int,
    schedule: NoiseSchedule,
    clamp: float,
) -> np.ndarray:
    """One deterministic DDIM step (eta = 0) from t_cur to t_next.

    x0_hat is clamped to [-clamp, clamp] componentwise before use; t_next == -1
    is treated as abar == 1 and returns the clamped x0_hat.
    """
    if t_cur <= 0:
        raise ValueError(f"t_cur must be positive, got {t_cur}")
    if t_next >= t_cur:
        raise ValueError(f"t_next ({t_next}) must be below t_cur ({t_cur})")
    if not np.all(np.isfinite(x0_hat)):
        raise ValueError("non-finite x0_hat")
    x0_hat = np.clip(x0_hat, -clamp, clamp)
    abar_cur = schedule.abar(t_cur)
    abar_next = schedule.abar(t_next)
    eps_hat = (x_t - math.sqrt(abar_cur) * x0_hat) / math.sqrt(1.0 - abar_cur)
    return math.sqrt(abar_next) * x0_hat + math.sqrt(1.0 - abar_next) * eps_hat


def ddim_step(
    state: DiffusionState,
    x0_sizes: np.ndarray,
    x0_labels: np.ndarray,
    t_cur: int,
    t_next: int,
    schedule: NoiseSchedule,
    scaling: ScalingConfig,
) -> DiffusionState:
    """DDIM step applied to both channels of a DiffusionState."""
    sizes = ddim_update(state.sizes_t, x0_sizes, t_cur, t_next, schedule, scaling.size_scale)
    labels = ddim_update(state.labels_t, x0_labels, t_cur, t_next, schedule, scaling.label_scale)
    return DiffusionState(sizes_t=sizes, labels_t=labels, t=t_next)


def timestep_pairs(steps: int, T: int) -> list[tuple[int, int]]:
    """Sampling-time pairs: steps+1 even values from T-1 down to -1, rounded.

    Yields exactly `steps` pairs with strictly decreasing endpoints ending
    at -1.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    times = np.linspace(T - 1, -1, steps + 1)
    times = [int(round(v)) for v in times]
    pairs = list(zip(times[:-1], times[1:]))
    for t_cur, t_next in pairs:
        if t_next >= t_cur:
            raise ValueError(f"degenerate timestep pair ({t_cur}, {t_next}); steps too large for T={T}")
    return pairs
