"""Variance schedule for the paired forward diffusions and the reverse sampler.

The schedule fixes per-step variances beta_1..beta_T together with the
derived quantities a_t = 1 - beta_t and abar_t = prod_{s<=t} a_s that the
closed-form noising marginal and the posterior mean need.  Timesteps are
1-based in every public signature; internally arrays are stored 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["NoiseSchedule", "build_linear_schedule", "marginal_coeffs"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable variance schedule; safe to share across threads.

    Attributes:
        T: number of diffusion steps.
        beta: per-step variances, shape (T,), each in (0, 1).
        a: 1 - beta, shape (T,).
        abar: cumulative products of a, shape (T,), strictly decreasing.
        beta_start, beta_end: endpoints used to build the schedule, kept
            for checkpoint serialization.
    """

    T: int
    beta: np.ndarray
    a: np.ndarray = field(repr=False)
    abar: np.ndarray = field(repr=False)
    beta_start: float = 0.0
    beta_end: float = 0.0

    def check_timestep(self, t: int) -> None:
        if not isinstance(t, (int, np.integer)):
            raise TypeError(f"timestep must be an integer, got {type(t).__name__}")
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def build_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a linear variance schedule with beta_1 = beta_start, beta_T = beta_end.

    Defaults are the standard DDPM endpoints.  Raises ValueError on
    non-positive T, endpoints outside (0, 1), or beta_start > beta_end.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"step count T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError(f"beta endpoints must lie in (0, 1), got ({beta_start}, {beta_end})")
    if beta_start > beta_end:
        raise ValueError(f"beta_start {beta_start} exceeds beta_end {beta_end}")

    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    a = 1.0 - beta
    abar = np.cumprod(a)
    return NoiseSchedule(
        T=int(T), beta=beta, a=a, abar=abar,
        beta_start=float(beta_start), beta_end=float(beta_end),
    )


def marginal_coeffs(s: NoiseSchedule, t: int) -> tuple[float, float]:
    """Closed-form marginal coefficients at step t.

    Returns (sqrt(abar_t), sqrt(1 - abar_t)); the pair has unit norm, so
    z_t = signal_coeff * z_0 + noise_coeff * eps preserves variance for
    unit-scale data.
    """
    s.check_timestep(t)
    abar_t = s.abar[t - 1]
    return float(np.sqrt(abar_t)), float(np.sqrt(1.0 - abar_t))
