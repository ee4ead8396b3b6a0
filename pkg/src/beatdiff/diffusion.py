"""Paired forward diffusions with mirrored noise and the ancestral reverse sampler.

The two forward chains share a clean start z_0 and one Gaussian draw eps;
the positive chain adds +eps, the negative chain adds -eps.  Closed-form
marginals are used throughout (z_t = sqrt(abar_t) z_0 +/- sqrt(1-abar_t) eps),
which is the distribution-level consequence of mirroring the same draw at
every step.  All functions are pure; arrays may be numpy or torch, and the
caller owns every source of randomness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .schedule import NoiseSchedule, marginal_coeffs

__all__ = [
    "CLEAN", "POSITIVE", "NEGATIVE",
    "LatentSample", "NoisePair", "diffuse_pair", "reverse_step", "sample",
]

CLEAN = "clean"
POSITIVE = "positive"
NEGATIVE = "negative"
_BRANCHES = (CLEAN, POSITIVE, NEGATIVE)


@dataclass
class LatentSample:
    """A latent array tagged with its diffusion timestep and branch.

    t = 0 means clean data and forces branch = "clean".
    """

    z: object  # numpy array or torch tensor, shape (..., C, H, W) or scalar-like
    t: int = 0
    branch: str = CLEAN

    def __post_init__(self):
        if self.branch not in _BRANCHES:
            raise ValueError(f"unknown branch {self.branch!r}")
        if self.t == 0 and self.branch != CLEAN:
            raise ValueError("t=0 latents must carry branch='clean'")
        if self.t > 0 and self.branch == CLEAN:
            raise ValueError(f"noised latent (t={self.t}) cannot carry branch='clean'")


@dataclass(frozen=True)
class NoisePair:
    """One shared Gaussian draw; the negative branch uses its exact mirror."""

    eps: object

    @property
    def eps_neg(self):
        return -self.eps


def _check_shapes(a, b, what: str) -> None:
    if tuple(np.shape(a)) != tuple(np.shape(b)):
        raise ValueError(f"{what}: shape {tuple(np.shape(a))} does not match {tuple(np.shape(b))}")


def diffuse_pair(z0: LatentSample, t: int, eps: NoisePair, s: NoiseSchedule) -> tuple[LatentSample, LatentSample]:
    """Noise a clean latent to step t along both branches.

    Returns (z_t_pos, z_t_neg) with
        z_t_pos = sqrt(abar_t) z_0 + sqrt(1-abar_t) eps
        z_t_neg = sqrt(abar_t) z_0 - sqrt(1-abar_t) eps
    so z_t_pos + z_t_neg = 2 sqrt(abar_t) z_0 and the negative branch equals
    the positive closed form evaluated at -eps, bit for bit.
    """
    if z0.branch != CLEAN:
        raise ValueError(f"diffuse_pair needs a clean latent, got branch={z0.branch!r}")
    s.check_timestep(t)
    _check_shapes(eps.eps, z0.z, "noise")
    ca, cn = marginal_coeffs(s, t)
    signal = ca * z0.z
    zt_pos = signal + cn * eps.eps
    zt_neg = signal - cn * eps.eps
    return (
        LatentSample(z=zt_pos, t=t, branch=POSITIVE),
        LatentSample(z=zt_neg, t=t, branch=NEGATIVE),
    )


def reverse_step(
    zt: LatentSample,
    eps_pred,
    t: int,
    s: NoiseSchedule,
    rng_noise=None,
) -> LatentSample:
    """One ancestral denoising step from z_t to z_{t-1}.

    Posterior mean mu = (z_t - beta_t / sqrt(1-abar_t) * eps_pred) / sqrt(a_t)
    with fixed variance sigma_t^2 = beta_t.  `rng_noise` is the caller's
    standard-normal draw; pass None for the deterministic mean.  No noise is
    ever added at t=1.
    """
    s.check_timestep(t)
    _check_shapes(eps_pred, zt.z, "noise estimate")
    beta_t = float(s.beta[t - 1])
    a_t = float(s.a[t - 1])
    _, cn = marginal_coeffs(s, t)
    mean = (zt.z - (beta_t / cn) * eps_pred) / np.sqrt(a_t)
    if t > 1 and rng_noise is not None:
        _check_shapes(rng_noise, zt.z, "injected noise")
        mean = mean + np.sqrt(beta_t) * rng_noise
    new_t = t - 1
    branch = zt.branch if new_t > 0 else CLEAN
    return LatentSample(z=mean, t=new_t, branch=branch)


def sample(
    denoiser: Callable,
    c,
    s: NoiseSchedule,
    shape: tuple[int, ...],
    seed: int,
    branch: str = POSITIVE,
    rng: Optional[np.random.Generator] = None,
) -> LatentSample:
    """Draw a latent by running the full reverse chain under one conditioning.

    Starts from z_T ~ N(0, I) and iterates reverse_step T times with
    eps_pred = denoiser(z_t, t, c).  Deterministic given `seed` (or a
    caller-supplied generator).  The negative branch is exposed only for
    diagnostics; generation uses the positive conditioning.
    """
    if branch not in (POSITIVE, NEGATIVE):
        raise ValueError(f"sampling branch must be positive or negative, got {branch!r}")
    if rng is None:
        rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape)
    current = LatentSample(z=z, t=s.T, branch=branch)
    for t in range(s.T, 0, -1):
        eps_pred = denoiser(current.z, t, c)
        _check_shapes(eps_pred, current.z, "denoiser output")
        noise = rng.standard_normal(shape) if t > 1 else None
        current = reverse_step(current, eps_pred, t, s, rng_noise=noise)
    return current
