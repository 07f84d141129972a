"""Closed-form scheduler math shared by every estimation method.

The package-wide time convention is t=0 noise, t=1 data. Affine Gaussian
probability paths interpolate between the two ends:

    psi_t(x0 | x1) = sigma(t) * x0 + alpha(t) * x1

The default instance is the optimal-transport path alpha=t, sigma=1-t,
whose conditional velocity is the constant displacement x1 - x0.

Diffusion-style schedules (variance preserving, variance exploding, and
the sigma-parameterised denoiser preconditioning) are expressed in their
own natural clock, with the noise level growing in the argument; the
flip onto the package convention happens where the training losses and
samplers assemble their inputs, not here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, SingularTimeError

# Solvers clamp integration times into [EPS_T, 1 - EPS_T] so formulas that
# divide by sigma(t), alpha(t), or t itself stay finite.
EPS_T = 1e-3


@dataclass(frozen=True)
class AffinePath:
    """Signal/noise schedule of a Gaussian path, with time derivatives.

    All four callables are vectorized over ``t``.
    """

    alpha: Callable
    sigma: Callable
    dalpha: Callable
    dsigma: Callable

    @staticmethod
    def condot() -> "AffinePath":
        """The optimal-transport path: alpha=t, sigma=1-t."""
        return AffinePath(
            alpha=lambda t: np.asarray(t, dtype=float),
            sigma=lambda t: 1.0 - np.asarray(t, dtype=float),
            dalpha=lambda t: np.ones_like(np.asarray(t, dtype=float)),
            dsigma=lambda t: -np.ones_like(np.asarray(t, dtype=float)),
        )


def condot_point(t, x0, x1):
    """Point on the optimal-transport path, (1-t)*x0 + t*x1."""
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape:
        raise ValueError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    t = np.asarray(t)
    return (1.0 - t) * x0 + t * x1


def affine_conditional_velocity(path: AffinePath, t, x, x1):
    """Velocity of the conditional path through ``x`` toward ``x1``.

    u_t(x | x1) = (dsigma/sigma) * (x - alpha * x1) + dalpha * x1.

    On the optimal-transport path, evaluated at x = psi_t(x0|x1), this
    collapses to the constant x1 - x0. Undefined at sigma(t)=0 (the data
    endpoint).
    """
    t = np.asarray(t, dtype=float)
    sig = np.asarray(path.sigma(t))
    if np.any(sig == 0.0):
        raise SingularTimeError("conditional velocity undefined where sigma(t)=0")
    al = np.asarray(path.alpha(t))
    ratio = path.dsigma(t) / sig
    return ratio * (np.asarray(x) - al * np.asarray(x1)) + path.dalpha(t) * np.asarray(x1)


# -- variance-preserving / variance-exploding schedules ----------------


@dataclass(frozen=True)
class VPCoefficients:
    """Linear beta schedule of the variance-preserving process.

    The forward process dx = -1/2 beta(tau) x dtau + sqrt(beta(tau)) dw
    contracts the signal while injecting matched noise, so the marginal
    variance stays at 1 for unit-variance data.
    """

    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if self.beta_min <= 0 or self.beta_max < self.beta_min:
            raise ConfigurationError(
                f"need 0 < beta_min <= beta_max, got ({self.beta_min}, {self.beta_max})"
            )

    def beta(self, tau):
        return self.beta_min + np.asarray(tau, dtype=float) * (self.beta_max - self.beta_min)

    def _beta_integral(self, tau):
        tau = np.asarray(tau, dtype=float)
        return self.beta_min * tau + 0.5 * (self.beta_max - self.beta_min) * tau * tau

    def mean_scale(self, tau):
        """Transition-kernel signal scale exp(-1/2 int_0^tau beta)."""
        return np.exp(-0.5 * self._beta_integral(tau))

    def marginal_std(self, tau):
        """Transition-kernel noise std sqrt(1 - mean_scale^2)."""
        m = self.mean_scale(tau)
        return np.sqrt(np.maximum(1.0 - m * m, 0.0))


def vp_drift_diffusion(coeffs: VPCoefficients, t, x):
    """Forward drift and diffusion of the VP process at its own time ``t``.

    Returns (-1/2 beta(t) x, sqrt(beta(t))).
    """
    b = coeffs.beta(t)
    return -0.5 * b * np.asarray(x), np.sqrt(b)


@dataclass(frozen=True)
class VECoefficients:
    """Geometric noise schedule of the variance-exploding process."""

    sigma_min: float = 0.01
    sigma_max: float = 15.0

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigurationError(
                f"need 0 < sigma_min < sigma_max, got ({self.sigma_min}, {self.sigma_max})"
            )

    def sigma(self, tau):
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** np.asarray(tau, dtype=float)


def ve_diffusion(coeffs: VECoefficients, t):
    """Diffusion sqrt(d sigma^2/dt) of the VE process, evaluated analytically.

    For the geometric schedule this is sigma(t) * sqrt(2 ln(sigma_max/sigma_min)).
    """
    return coeffs.sigma(t) * math.sqrt(2.0 * math.log(coeffs.sigma_max / coeffs.sigma_min))


def gaussian_conditional_score(mu, sigma_t, x):
    """Score of N(mu, sigma_t^2 I) at x, i.e. -(x - mu) / sigma_t^2."""
    sigma_t = np.asarray(sigma_t, dtype=float)
    if np.any(sigma_t <= 0):
        raise ValueError("sigma_t must be positive")
    return -(np.asarray(x) - np.asarray(mu)) / (sigma_t * sigma_t)


# -- denoiser preconditioning ------------------------------------------


@dataclass(frozen=True)
class EDMPreconditioner:
    """Sigma-dependent scaling bundle around the raw denoising network.

    The denoiser is assembled as

        D(x; sigma) = c_skip(sigma) * x + c_out(sigma) * F(c_in(sigma) * x; c_noise(sigma))

    with c_in = 1/sqrt(sigma^2 + sigma_data^2), c_out = sigma*sigma_data/
    sqrt(sigma^2 + sigma_data^2), c_skip = sigma_data^2/(sigma^2 + sigma_data^2)
    and c_noise = ln(sigma)/4. The loss weight (sigma^2 + sigma_data^2) /
    (sigma * sigma_data)^2 makes the effective weight on the raw network
    output exactly one at every noise level. A constant unit scale schedule
    is assumed throughout (the scaled-time generalisation keeps these
    formulas but multiplies states by s(t); it is not implemented).
    """

    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise ConfigurationError("sigma_data must be positive")
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigurationError(
                f"need 0 < sigma_min < sigma_max, got ({self.sigma_min}, {self.sigma_max})"
            )


def edm_precondition(p: EDMPreconditioner, sigma):
    """The four scaling coefficients (c_skip, c_out, c_in, c_noise) at ``sigma``."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    sd2 = p.sigma_data * p.sigma_data
    denom = sigma * sigma + sd2
    c_skip = sd2 / denom
    c_out = sigma * p.sigma_data / np.sqrt(denom)
    c_in = 1.0 / np.sqrt(denom)
    c_noise = 0.25 * np.log(sigma)
    return c_skip, c_out, c_in, c_noise


def edm_loss_weight(p: EDMPreconditioner, sigma):
    """Per-sample loss weight (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    sd = p.sigma_data
    return (sigma * sigma + sd * sd) / np.square(sigma * sd)


def edm_sigma_schedule(n_steps: int, p: EDMPreconditioner) -> np.ndarray:
    """Sampling noise levels: rho-warped descent from sigma_max, plus final 0.

    sigma_i = (sigma_max^(1/rho) + i/(N-1) * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho
    for i = 0..N-1, then sigma_N = 0. Length n_steps + 1, strictly decreasing.
    """
    if n_steps < 1:
        raise ConfigurationError("n_steps must be >= 1")
    if n_steps == 1:
        return np.array([p.sigma_max, 0.0])
    inv = 1.0 / p.rho
    i = np.arange(n_steps, dtype=float)
    levels = (
        p.sigma_max**inv + i / (n_steps - 1) * (p.sigma_min**inv - p.sigma_max**inv)
    ) ** p.rho
    return np.append(levels, 0.0)


def sample_training_sigma(p: EDMPreconditioner, rng: np.random.Generator, size=None):
    """Draw training noise levels sigma = exp(p_mean + p_std * eps), eps ~ N(0,1)."""
    return np.exp(p.p_mean + p.p_std * rng.standard_normal(size))


# -- velocity / score conversion ---------------------------------------


def score_from_velocity(path: AffinePath, t, x, v):
    """Marginal score implied by a marginal velocity on a Gaussian path.

        s(x, t) = (v - (dalpha/alpha) x) / (sigma^2 (dalpha/alpha - dsigma/sigma))

    On the optimal-transport path this reduces to t (v - x/t) / (1 - t).
    Undefined at both endpoints (alpha(0)=0, sigma(1)=0).
    """
    t = np.asarray(t, dtype=float)
    al = np.asarray(path.alpha(t))
    sig = np.asarray(path.sigma(t))
    if np.any(al == 0.0) or np.any(sig == 0.0):
        raise SingularTimeError("score conversion undefined at path endpoints")
    ra = path.dalpha(t) / al
    rs = path.dsigma(t) / sig
    return (np.asarray(v) - ra * np.asarray(x)) / (sig * sig * (ra - rs))


def velocity_from_score(path: AffinePath, t, x, s):
    """Inverse of :func:`score_from_velocity` on the same path."""
    t = np.asarray(t, dtype=float)
    al = np.asarray(path.alpha(t))
    sig = np.asarray(path.sigma(t))
    if np.any(al == 0.0) or np.any(sig == 0.0):
        raise SingularTimeError("velocity conversion undefined at path endpoints")
    ra = path.dalpha(t) / al
    rs = path.dsigma(t) / sig
    return ra * np.asarray(x) + sig * sig * (ra - rs) * np.asarray(s)
