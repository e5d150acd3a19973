"""Diffusion noise schedule and the closed-form forward (noising) process.

Timesteps are 1-based at every public interface: ``t`` runs over ``1..T`` and
``alpha_bar(0) == 1`` denotes the clean image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NoiseSchedule",
    "NoisedImage",
    "make_linear_schedule",
    "schedule_from_fingerprint",
    "forward_noise",
    "sample_timesteps",
]


def _all_finite(x) -> bool:
    if hasattr(x, "isfinite"):  # torch tensor
        return bool(x.isfinite().all())
    return bool(np.all(np.isfinite(x)))


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise variances betas and cumulative signal products alpha_bars.

    ``betas[t-1]`` is the variance added at step ``t``;
    ``alpha_bars[t-1] == prod_{s<=t} (1 - beta_s)``.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if alpha_bars.shape != betas.shape:
            raise ValueError("alpha_bars must have the same length as betas")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        if np.any(alpha_bars <= 0.0) or np.any(alpha_bars > 1.0):
            raise ValueError("every alpha_bar must lie inside (0, 1]")
        if np.any(np.diff(alpha_bars) >= 0.0):
            raise ValueError("alpha_bars must be strictly decreasing in t")
        expected = np.cumprod(1.0 - betas)
        rel = np.abs(alpha_bars - expected) / expected
        if np.max(rel) > 1e-12:
            raise ValueError(
                "alpha_bars do not satisfy the cumulative-product recurrence "
                f"(max relative error {np.max(rel):.3e})"
            )
        betas.setflags(write=False)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal coefficient after ``t`` steps; ``alpha_bar(0) == 1``."""
        t = int(t)
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside [1, {self.T}]")
        return float(self.alpha_bars[t - 1])

    def fingerprint(self) -> dict:
        """Identity of the schedule; must match between checkpoint and config."""
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


@dataclass(frozen=True)
class NoisedImage:
    """Result of noising ``x0`` for ``t`` steps; ``epsilon`` is kept for the loss."""

    x_t: object
    t: int
    epsilon: object


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, "
            f"got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas))


def schedule_from_fingerprint(fingerprint) -> NoiseSchedule:
    """Rebuild the schedule a checkpoint was trained with from its fingerprint."""
    if fingerprint is None:
        raise ValueError("missing schedule fingerprint")
    if fingerprint.get("kind") != "linear":
        raise ValueError(f"unsupported schedule kind {fingerprint.get('kind')!r}")
    return make_linear_schedule(
        int(fingerprint["T"]), float(fingerprint["beta_start"]), float(fingerprint["beta_end"])
    )


def forward_noise(x0, t: int, epsilon, schedule: NoiseSchedule) -> NoisedImage:
    """Single-shot noising: ``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) epsilon``.

    Works on numpy arrays and torch tensors alike; deterministic given
    ``(x0, t, epsilon)``.
    """
    t = int(t)
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    if tuple(x0.shape) != tuple(epsilon.shape):
        raise ValueError(
            f"epsilon shape {tuple(epsilon.shape)} does not match x0 shape {tuple(x0.shape)}"
        )
    if not _all_finite(x0):
        raise ValueError("x0 contains non-finite values")
    ab = schedule.alpha_bar(t)
    x_t = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * epsilon
    return NoisedImage(x_t=x_t, t=t, epsilon=epsilon)


def sample_timesteps(batch_size: int, T: int, rng) -> np.ndarray:
    """Uniform timesteps in ``[1, T]``; reproducible for a fixed seed or Generator."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    rng = np.random.default_rng(rng)
    return rng.integers(1, T + 1, size=batch_size, dtype=np.int64)
