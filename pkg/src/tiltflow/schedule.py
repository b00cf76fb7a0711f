"""Affine flow path x_t = alpha_t x1 + sigma_t x0 and its derived coefficients.

Only the rectified-linear path (alpha_t = t, sigma_t = 1 - t) is provided.
The coefficients that blow up at the endpoints (a, b, s) are evaluated at
t clamped into [eps_t, 1 - eps_t].
"""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Coeffs:
    t: float
    alpha: float
    sigma: float
    alpha_dot: float
    sigma_dot: float
    a: float
    b: float
    s: float


@dataclass(frozen=True)
class StepCoeffs:
    u: float
    w: float


@dataclass(frozen=True)
class Schedule:
    """Rectified-linear flow schedule.

    Parameters
    ----------
    kind : str
        Path family; only ``"rectified-linear"`` is supported.
    eps_t : float
        Clamp margin for the singular coefficients near t = 0 and t = 1.
    """

    kind: str = "rectified-linear"
    eps_t: float = 1e-3

    def __post_init__(self):
        if self.kind != "rectified-linear":
            raise ValueError(f"unsupported schedule kind {self.kind!r}")
        if not (0.0 < self.eps_t < 0.5):
            raise ValueError("eps_t must lie in (0, 0.5)")

    def clamp(self, t):
        return np.clip(t, self.eps_t, 1.0 - self.eps_t)

    def alpha(self, t):
        return t

    def sigma(self, t):
        return 1.0 - t

    def a(self, t):
        return -1.0 / (1.0 - self.clamp(t))

    def b(self, t):
        return 1.0 / (1.0 - self.clamp(t))

    def s(self, t):
        tc = self.clamp(t)
        return (1.0 - tc) / tc

    def alpha_ratio(self, t):
        """alpha_dot / alpha at the clamped time."""
        return 1.0 / self.clamp(t)

    def coeffs(self, t):
        if not (0.0 <= t <= 1.0):
            raise ValueError(f"t={t} outside [0, 1]")
        t = float(t)
        return Coeffs(t=t, alpha=t, sigma=1.0 - t, alpha_dot=1.0, sigma_dot=-1.0,
                      a=float(self.a(t)), b=float(self.b(t)), s=float(self.s(t)))

    def step_coeffs(self, t_k, t_next):
        """Affine rescale factors carrying B from t_k to t_next."""
        b_next = self.b(t_next)
        return StepCoeffs(u=float(self.b(t_k) / b_next),
                          w=float((self.a(t_k) - self.a(t_next)) / b_next))

    def posterior_mean(self, x_t, v, t):
        """E[x1 | x_t] = (v - a x_t) / b, i.e. x_t + (1 - t) v on this path."""
        return (np.asarray(v) - self.a(t) * np.asarray(x_t)) / self.b(t)

    def velocity_from_mean(self, x_t, mu, t):
        return self.b(t) * np.asarray(mu) + self.a(t) * np.asarray(x_t)

    def score_from_velocity(self, x_t, v, t):
        """Marginal score grad log p_t(x_t) recovered from the velocity.

        Returns +(v - (alpha_dot/alpha) x_t) / s_t; with the coefficient
        definitions above this is the score itself, as confirmed by the
        analytic Gaussian world in :mod:`tiltflow.oracle`.
        """
        return (np.asarray(v) - self.alpha_ratio(t) * np.asarray(x_t)) / self.s(t)

    def guidance_std(self, t, eps=1e-3):
        """Heuristic isotropic proposal std (1 - t + eps) / sqrt(t + eps).

        Its square approximates sigma_t^2 / alpha_t, the factor converting the
        posterior-mean Jacobian into the posterior covariance.
        """
        return (1.0 - t + eps) / np.sqrt(t + eps)

    def unit_prior_jacobian(self, t):
        """Posterior-mean Jacobian scale for unit-variance Gaussian data."""
        tc = self.clamp(t)
        return tc / (tc * tc + (1.0 - tc) ** 2)


def coeffs(sched, t):
    return sched.coeffs(t)


def step_coeffs(sched, t_k, t_next):
    return sched.step_coeffs(t_k, t_next)


def posterior_mean(sched, x_t, v, t):
    return sched.posterior_mean(x_t, v, t)


def score_from_velocity(sched, x_t, v, t):
    return sched.score_from_velocity(x_t, v, t)
