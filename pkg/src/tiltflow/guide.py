"""Training-free guidance: DPS, LGD-MC, SIM-MC, SA-MC and the guided sampler.

Each estimator returns ``(g, diag)`` where ``diag["prefactor"]`` times
``diag["raw"]`` reproduces ``g`` exactly; the prefactor is the only place
b_t enters.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import softmax

from . import secant as sec
from .flow import OdeConfig, integrate
from .rng import as_generator

METHODS = ("none", "dps", "lgd_mc", "sim_mc", "sa_mc")


@dataclass
class GuidanceMethod:
    name: str = "sa_mc"
    n_samples: int = 32
    proposal_std: Optional[float] = None
    eps_h: float = 1e-3
    memory: int = 8
    sigma2: float = sec.SIGMA2
    sigma3: float = sec.SIGMA3
    damping: bool = True
    gamma0: Optional[float] = None
    antithetic: bool = False

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"unknown guidance method {self.name!r}")
        if self.n_samples < 1 or self.memory < 1:
            raise ValueError("n_samples and memory must be >= 1")
        if self.antithetic and self.n_samples % 2:
            raise ValueError("antithetic sampling needs an even n_samples")


def _std(method, sched, t):
    if method.proposal_std is not None:
        return float(method.proposal_std)
    return float(sched.guidance_std(t, method.eps_h))


def _lgd_prefactor(sched, t):
    """-(b sigma^2 / alpha) at the clamped time."""
    tc = float(sched.clamp(t))
    return -sched.b(t) * (1 - tc) ** 2 / tc


def _mean_and_vjp(flow, x, t, v):
    sched = flow.schedule
    a, b = sched.a(t), sched.b(t)
    mu = (v - a * x) / b

    def mean_vjp(c):
        return (flow.velocity_vjp(x, t, c) - a * c) / b

    return mu, mean_vjp


def draw_eps(rng, n, S, d, antithetic=False):
    if antithetic:
        half = rng.standard_normal((n, S // 2, d))
        return np.concatenate([half, -half], axis=1)
    return rng.standard_normal((n, S, d))


def g_dps(flow, cost, x, t, lam, v=None):
    x = np.atleast_2d(x)
    v = flow.velocity(x, t) if v is None else v
    mu, mean_vjp = _mean_and_vjp(flow, x, t, v)
    raw = mean_vjp(cost.grad(mu, lam))
    pre = _lgd_prefactor(flow.schedule, t)
    g = pre * raw
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite DPS guidance")
    return g, dict(raw=raw, prefactor=pre)


def g_lgd_mc(flow, cost, x, t, lam, method, rng, v=None, return_se=False):
    """Softmax-weighted cost gradient at Gaussian draws around mu, chained
    through mu only (the proposal spread is held fixed).

    ``return_se`` adds the delta-method standard error of g to the
    diagnostics (d extra vector-Jacobian products).
    """
    x = np.atleast_2d(x)
    v = flow.velocity(x, t) if v is None else v
    mu, mean_vjp = _mean_and_vjp(flow, x, t, v)
    n, d = x.shape
    S = method.n_samples
    std = _std(method, flow.schedule, t)
    x1 = mu[:, None, :] + std * draw_eps(rng, n, S, d, method.antithetic)
    ell = -cost.value(x1, lam)
    if not np.all(np.isfinite(ell.max(axis=1))):
        raise FloatingPointError("cost overflow")
    w = softmax(ell, axis=1)
    h = cost.grad(x1, lam)
    c = np.einsum("ns,nsd->nd", w, h)
    raw = mean_vjp(c)
    pre = _lgd_prefactor(flow.schedule, t)
    g = pre * raw
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite LGD guidance")
    diag = dict(raw=raw, prefactor=pre, ess=1.0 / np.sum(w * w, axis=1))
    if return_se:
        dev = (h - c[:, None, :]) * w[..., None]
        vals, vecs = np.linalg.eigh(np.einsum("nsi,nsj->nij", dev, dev))
        var = np.zeros_like(g)
        for k in range(d):
            col = vecs[:, :, k] * np.sqrt(np.clip(vals[:, k], 0, None))[:, None]
            var += (pre * mean_vjp(col)) ** 2
        diag["se"] = np.sqrt(var)
    return g, diag


def tilted_mean(x1_pred, apply_noise, cost, lam, S, rng, antithetic=False):
    """Self-normalized shift sum_i w_i xi_i with w proportional to exp(-J(x1_pred + xi_i)).

    ``apply_noise`` maps standard normals of shape (n, S, d) to xi. The
    shift is returned without any b_t factor.
    """
    x1_pred = np.atleast_2d(np.asarray(x1_pred, dtype=np.float64))
    n, d = x1_pred.shape
    eps = draw_eps(rng, n, S, d, antithetic)
    xi = apply_noise(eps)
    ell = -cost.value(x1_pred[:, None, :] + xi, lam)
    ell_max = ell.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(ell_max)):
        raise FloatingPointError("cost overflow")
    omega = np.exp(ell - ell_max)
    Z = omega.sum(axis=1)
    shift = np.einsum("ns,nsd->nd", omega, xi) / Z[:, None]
    ess = Z * Z / np.sum(omega * omega, axis=1)
    nbytes = eps.nbytes + xi.nbytes + ell.nbytes + omega.nbytes
    wn = omega / Z[:, None]
    # delta-method standard error of the self-normalized mean
    se = np.sqrt(np.einsum("ns,nsd->nd", wn * wn, (xi - shift[:, None, :]) ** 2))
    return shift, dict(ess=ess, weights=wn, se=se, nbytes=nbytes)


def g_sim_mc(flow, cost, x, t, lam, method, rng, v=None):
    x = np.atleast_2d(x)
    v = flow.velocity(x, t) if v is None else v
    sched = flow.schedule
    mu = sched.posterior_mean(x, v, t)
    std = _std(method, sched, t)
    raw, diag = tilted_mean(mu, lambda e: std * e, cost, lam, method.n_samples, rng,
                            method.antithetic)
    pre = sched.b(t)
    g = pre * raw
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite SIM guidance")
    return g, dict(raw=raw, prefactor=pre, ess=diag["ess"], se=abs(pre) * diag["se"])


class SAMCGuidance:
    """Stateful SA-MC guidance for a batch of trajectories.

    The proposal covariance is (sigma^2/alpha) B_k; the sigma^2/alpha factor
    is realized by scaling the square-root factor with the heuristic std.
    """

    def __init__(self, flow, cost, lam, method, rng, n, dim=2, t0=0.0):
        self.flow, self.cost, self.lam, self.method, self.rng = flow, cost, lam, method, rng
        sched = flow.schedule
        g0 = method.gamma0 if method.gamma0 is not None else sched.unit_prior_jacobian(t0)
        self.state = sec.SecantState.create(n, dim, g0, method.memory)
        self.peak_nbytes_per_traj = 0.0
        self.max_secant_residual = 0.0
        self.min_band_margin = np.inf
        self.n_fallback = 0
        self.n_jitter = 0

    def __call__(self, k, t, t_next, x, v):
        m = self.method
        sched = self.flow.schedule
        sd = sec.secant_update(self.state, x, v, t, sched, m.sigma2, m.sigma3, m.damping)
        F = sec.semi_numerical_sqrt(self.state.B)
        self.n_fallback += int(F.fallback.sum())
        self.n_jitter += int((F.jitter > 0).sum())
        x1 = x + (1 - t) * v
        std = _std(m, sched, t)
        raw, td = tilted_mean(x1, lambda e: std * sec.apply_L(F, e), self.cost, self.lam,
                              m.n_samples, self.rng, m.antithetic)
        pre = sched.b(t)
        g = pre * raw
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite SA-MC guidance at step {k}")
        n = len(x)
        per_traj = (self.state.nbytes_per_trajectory() + F.nbytes() / n + td["nbytes"] / n)
        self.peak_nbytes_per_traj = max(self.peak_nbytes_per_traj, per_traj)
        diag = dict(raw=raw, prefactor=pre, ess=td["ess"], gamma=self.state.B.gamma.copy(),
                    m=self.state.B.rank, jitter=F.jitter, fallback=F.fallback)
        if sd:
            live = sd["live"]
            if live.any():
                self.max_secant_residual = max(self.max_secant_residual,
                                               float(sd["secant_residual"][live].max()))
                scale = np.maximum(sd["scale"][live], 1e-300)
                margin = np.minimum(sd["band_lo"][live], sd["band_hi"][live]) / scale
                self.min_band_margin = min(self.min_band_margin, float(margin.min()))
            diag.update(phi=sd["phi"], secant_residual=sd["secant_residual"],
                        skipped=sd["skipped"])
        return g, diag

    def memory_bound_bytes(self, dim=2):
        """8 bytes per word of O(dm + m^2 + S d) with m = 2 M."""
        m = 2 * self.method.memory
        return 8 * (dim * m + m * m + self.method.n_samples * dim)


def make_guidance(flow, cost, method, lam, rng, n, dim=2, t0=0.0):
    """Build the per-step callable expected by :func:`tiltflow.flow.integrate`."""
    if method.name == "none":
        return None
    if method.name == "sa_mc":
        return SAMCGuidance(flow, cost, lam, method, rng, n, dim, t0)
    if method.name == "dps":
        return lambda k, t, tn, x, v: g_dps(flow, cost, x, t, lam, v)
    if method.name == "lgd_mc":
        return lambda k, t, tn, x, v: g_lgd_mc(flow, cost, x, t, lam, method, rng, v)
    return lambda k, t, tn, x, v: g_sim_mc(flow, cost, x, t, lam, method, rng, v)


def guided_sample(flow, cost, method, lam, n, config=None, rng=None, record=False):
    """Guided ODE generation; noise for x0 is drawn first from ``rng``.

    Returns (points, traces, guidance_object).
    """
    config = OdeConfig() if config is None else config
    if isinstance(method, str):
        method = GuidanceMethod(method)
    rng = as_generator(rng, "flow.sample")
    x0 = rng.standard_normal((int(n), 2))
    guidance = make_guidance(flow, cost, method, lam, rng, int(n), 2, config.t_start)
    x, traces = integrate(flow, x0, config, guidance=guidance, record=record)
    return x, traces, guidance
