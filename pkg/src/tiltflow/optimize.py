"""Point-solution search: time-annealed density-gradient descent and the
plain cost-gradient baseline.

Iterates are batched: ``x`` has shape (n, 2) and every start evolves
independently.
"""
import csv
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator

from .rng import as_generator
from .validation import check_points


@dataclass
class AnnealConfig:
    n_iter: int = 300
    step_size: float = 0.02
    t_max: float = 0.98
    t_min_start: float = 0.02
    t_min_end: float = 0.5
    lam: float = 1.0
    n_t_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not (0.02 <= self.t_min_start <= self.t_min_end <= self.t_max <= 0.98):
            raise ValueError("need 0.02 <= t_min_start <= t_min_end <= t_max <= 0.98")
        if self.n_iter < 0 or self.n_t_samples < 1:
            raise ValueError("bad iteration counts")

    def t_min(self, k):
        frac = k / max(self.n_iter - 1, 1)
        return self.t_min_start + (self.t_min_end - self.t_min_start) * min(frac, 1.0)


@dataclass
class OptTrace:
    """Per-iteration records; index 0 is the starting point (t = nan)."""

    t: List[float] = field(default_factory=list)
    x: List[np.ndarray] = field(default_factory=list)
    cost: List[np.ndarray] = field(default_factory=list)
    neg_log_p: List[np.ndarray] = field(default_factory=list)
    grad_norm: List[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.x)

    def append(self, t, x, cost_val, nlp, gnorm):
        self.t.append(float(t))
        self.x.append(x.copy())
        self.cost.append(cost_val)
        self.neg_log_p.append(nlp)
        self.grad_norm.append(gnorm)

    @property
    def final(self):
        return self.x[-1]

    def to_csv(self, path, start=0):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "t", "x", "y", "cost", "neg_log_p", "grad_norm"])
            for k in range(len(self)):
                x = self.x[k][start]
                nlp = self.neg_log_p[k]
                w.writerow([k, repr(self.t[k]), repr(float(x[0])), repr(float(x[1])),
                            repr(float(self.cost[k][start])),
                            "" if nlp is None else repr(float(nlp[start])),
                            repr(float(self.grad_norm[k][start]))])


def add_noise(x, t, rng, sched=None):
    """x_t = t x + (1 - t) eps with eps ~ N(0, I)."""
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t outside [0, 1]")
    eps = rng.standard_normal(x.shape)
    tb = t[..., None] if t.ndim else t
    return tb * x + (1 - tb) * eps


def density_grad_step(x, cost, flow, config, k, rng, use_flow=True):
    """One annealed step x <- x - eta (grad J(x) - score_t(x_t)).

    The score is read off the velocity at the noised point x_t; the cost
    gradient is taken at the clean iterate. Returns (x_next, diag).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = cost.grad(x, config.lam)
    t_used = np.full(len(x), np.nan)
    if use_flow:
        sched = flow.schedule
        lo, hi = config.t_min(k), config.t_max
        score = np.zeros_like(x)
        for _ in range(config.n_t_samples):
            t = rng.uniform(lo, hi, len(x))
            xt = add_noise(x, t, rng)
            v = flow.velocity(xt, t)
            tc = sched.clamp(t)[:, None]
            score += (v - xt / tc) / ((1 - tc) / tc)
        g = g - score / config.n_t_samples
        t_used = t
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("optimizer diverged")
    return x - config.step_size * g, dict(t=t_used, grad_norm=np.linalg.norm(g, axis=1))


def _run(x0, cost, flow, config, neg_log_p, use_flow):
    x = check_points(x0, 2, "x0").copy()
    rng = as_generator(config.seed, "optimize")
    nlp = (lambda z: neg_log_p(z)) if neg_log_p is not None else (lambda z: None)
    trace = OptTrace()
    trace.append(np.nan, x, cost.value(x, config.lam), nlp(x), np.zeros(len(x)))
    for k in range(config.n_iter):
        x, diag = density_grad_step(x, cost, flow, config, k, rng, use_flow)
        t = np.nanmean(diag["t"]) if use_flow else np.nan
        trace.append(t, x, cost.value(x, config.lam), nlp(x), diag["grad_norm"])
    return trace


def optimize_point(x0, cost, flow, config, neg_log_p=None):
    """Time-annealed density-gradient optimization from every start in x0."""
    return _run(x0, cost, flow, config, neg_log_p, use_flow=True)


def optimize_cost_only(x0, cost, config, neg_log_p=None):
    """Baseline x <- x - eta grad(lam J)(x)."""
    return _run(x0, cost, None, config, neg_log_p, use_flow=False)


class DensityGradientOptimizer(BaseEstimator):
    """Point solutions of min lam J(x) - log p(x) with a learned flow prior.

    ``fit`` stores the flow and cost; ``transform(X0)`` returns optimized
    points. ``use_flow=False`` gives the cost-gradient baseline.
    """

    def __init__(self, n_iter=300, step_size=0.02, lam=1.0, t_max=0.98, t_min_start=0.02,
                 t_min_end=0.5, n_t_samples=1, use_flow=True, random_state=0):
        self.n_iter = n_iter
        self.step_size = step_size
        self.lam = lam
        self.t_max = t_max
        self.t_min_start = t_min_start
        self.t_min_end = t_min_end
        self.n_t_samples = n_t_samples
        self.use_flow = use_flow
        self.random_state = random_state

    def _config(self):
        return AnnealConfig(self.n_iter, self.step_size, self.t_max, self.t_min_start,
                            self.t_min_end, self.lam, self.n_t_samples, self.random_state)

    def fit(self, flow, cost):
        self.flow_, self.cost_ = flow, cost
        return self

    def transform(self, X0):
        cfg = self._config()
        if self.use_flow:
            self.trace_ = optimize_point(X0, self.cost_, self.flow_, cfg)
        else:
            self.trace_ = optimize_cost_only(X0, self.cost_, cfg)
        return self.trace_.final
