"""Independent references used to verify the production code paths.

Everything here is dense and O(d^2) or worse on purpose; nothing in the
samplers or optimizers imports this module.
"""
import json
from dataclasses import asdict, dataclass

import numpy as np

from .schedule import Schedule


class GaussianWorld:
    """Data law p = N(mean, S) pushed along the rectified-linear path.

    Implements the velocity protocol (``velocity``, ``velocity_vjp``,
    ``schedule``) with the exact marginal velocity field.
    """

    def __init__(self, S=None, mean=None, sched=None):
        self.S = np.eye(2) if S is None else np.asarray(S, dtype=np.float64)
        d = self.S.shape[0]
        self.mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=np.float64)
        if not np.allclose(self.S, self.S.T) or np.linalg.eigvalsh(self.S).min() <= 0:
            raise ValueError("S must be SPD")
        self.schedule = Schedule() if sched is None else sched

    @property
    def dim(self):
        return self.S.shape[0]

    def marginal_cov(self, t):
        return t * t * self.S + (1 - t) ** 2 * np.eye(self.dim)

    def mean_jacobian(self, t):
        """d E[x1 | x_t] / d x_t = t S (t^2 S + (1-t)^2 I)^{-1}."""
        return t * self.S @ np.linalg.inv(self.marginal_cov(t))

    def posterior(self, x_t, t):
        x_t = np.atleast_2d(x_t)
        K = self.mean_jacobian(t)
        mu = self.mean + (x_t - t * self.mean) @ K.T
        cov = (1 - t) ** 2 * self.S @ np.linalg.inv(self.marginal_cov(t))
        return mu, cov

    def velocity(self, X, t):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any(t_arr >= 1):
            raise ValueError("analytic velocity needs t < 1")
        if t_arr.ndim == 0:
            mu, _ = self.posterior(X, float(t_arr))
            return (mu - X) / (1 - t_arr)
        t_arr = np.broadcast_to(t_arr, (X.shape[0],))
        d = self.dim
        A = t_arr[:, None, None] ** 2 * self.S + (1 - t_arr[:, None, None]) ** 2 * np.eye(d)
        z = np.linalg.solve(A, (X - t_arr[:, None] * self.mean)[..., None])[..., 0]
        mu = self.mean + t_arr[:, None] * z @ self.S.T
        return (mu - X) / (1 - t_arr[:, None])

    def velocity_jacobian(self, t):
        return (self.mean_jacobian(t) - np.eye(self.dim)) / (1 - t)

    def velocity_vjp(self, X, t, cotangent):
        return np.atleast_2d(cotangent) @ self.velocity_jacobian(t)

    def score(self, X, t):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return -(X - t * self.mean) @ np.linalg.inv(self.marginal_cov(t)).T

    def log_density(self, X):
        X = np.atleast_2d(X)
        P = np.linalg.inv(self.S)
        z = X - self.mean
        return (-0.5 * np.einsum("ni,ij,nj->n", z, P, z)
                - 0.5 * np.log(np.linalg.det(2 * np.pi * self.S)))


def analytic_velocity(world, x, t):
    return world.velocity(x, t)


def analytic_posterior(world, x_t, t):
    return world.posterior(x_t, t)


def fd_jacobian(f, x, h=1e-5):
    """Central-difference Jacobian of a vector map, column by column."""
    x = np.asarray(x, dtype=np.float64)
    f0 = np.atleast_1d(f(x))
    J = np.zeros((f0.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        J[:, i] = (np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2 * h)
    return J


def dense_B_recursion(pairs, gamma0, dim):
    """B_{k+1} = u (V^T B V + rho y y^T) + w I, written out densely.

    ``pairs`` is a sequence of (s, y, u, w).
    """
    B = gamma0 * np.eye(dim)
    I = np.eye(dim)
    for s, y, u, w in pairs:
        s = np.asarray(s, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        sy = y @ s
        if sy <= 0:
            raise ValueError("curvature violated")
        rho = 1.0 / sy
        V = I - rho * np.outer(s, y)
        B = u * (V.T @ B @ V + rho * np.outer(y, y)) + w * I
    return B


def dense_sqrt(B):
    """Symmetric PSD square root through an eigendecomposition."""
    B = 0.5 * (np.asarray(B) + np.asarray(B).T)
    vals, vecs = np.linalg.eigh(B)
    if vals.min() < -1e-10:
        raise ValueError("matrix has a negative eigenvalue")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


# -- Gauss-Hermite quadrature over Gaussian proposals -----------------------

def gauss_hermite_nodes(mu, Sigma, order=40):
    """Tensor-product nodes and weights integrating against N(mu, Sigma)."""
    if order < 20:
        raise ValueError("quadrature order must be >= 20")
    mu = np.asarray(mu, dtype=np.float64)
    d = mu.size
    z, w = np.polynomial.hermite.hermgauss(order)
    grids = np.meshgrid(*([z] * d), indexing="ij")
    Z = np.stack([g.ravel() for g in grids], axis=1) * np.sqrt(2.0)
    W = np.ones(Z.shape[0])
    for g in np.meshgrid(*([w] * d), indexing="ij"):
        W = W * g.ravel()
    W = W / np.pi ** (d / 2)
    L = np.linalg.cholesky(Sigma)
    return mu + Z @ L.T, W


def tilted_moments(cost_fn, mu, Sigma, order=40):
    """E[z], E[|z|^2] and log Z under N(mu, Sigma) tilted by exp(-cost_fn)."""
    X, W = gauss_hermite_nodes(mu, Sigma, order)
    ell = -cost_fn(X)
    m = ell.max()
    w = W * np.exp(ell - m)
    Zs = w.sum()
    z = X - mu
    Ez = (w[:, None] * z).sum(0) / Zs
    Ez2 = (w * (z * z).sum(1)).sum() / Zs
    return Ez, Ez2, np.log(Zs) + m


def quadrature_guidance(cost_fn, mu, Sigma, b_t, mean_jacobian=None, prefactor=None,
                        order=40):
    """Quadrature-exact LGD and SIM guidance for a Gaussian proposal.

    g_SIM = b E_tilt[z]; g_LGD = prefactor * B^T Sigma^{-1} E_tilt[z], with B
    the posterior-mean Jacobian and prefactor = b sigma^2 / alpha.
    """
    Ez, _, _ = tilted_moments(cost_fn, mu, Sigma, order)
    g_sim = b_t * Ez
    g_lgd = None
    if mean_jacobian is not None:
        g_lgd = prefactor * np.asarray(mean_jacobian).T @ np.linalg.solve(Sigma, Ez)
    return g_lgd, g_sim


def tilted_gaussian_closed_form(mu, Sigma, curvature, center):
    """Mean and covariance of N(mu, Sigma) * exp(-0.5 (x-c)^T A (x-c))."""
    P0 = np.linalg.inv(Sigma)
    P = P0 + curvature
    cov = np.linalg.inv(P)
    mean = cov @ (P0 @ mu + curvature @ center)
    return mean, cov


@dataclass
class BoundReport:
    gap_sq: float
    bound: float
    e_t: float
    tilted_z2: float
    sigma_inv_norm: float
    b_t: float
    passed: bool

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def check_theorem2(world, x_t, t, Sigma_proposal, cost_fn, order=40):
    """Compare |g_LGD - g_SIM|^2 against its covariance-mismatch bound."""
    sched = world.schedule
    c = sched.coeffs(t)
    mu = world.posterior(x_t, t)[0][0]
    Bt = world.mean_jacobian(t)
    ratio = c.sigma ** 2 / c.alpha
    Sigma = np.asarray(Sigma_proposal, dtype=np.float64)
    _, Ez2, _ = tilted_moments(cost_fn, mu, Sigma, order)
    g_lgd, g_sim = quadrature_guidance(cost_fn, mu, Sigma, c.b, Bt, c.b * ratio, order)
    e_t = np.linalg.norm(Sigma - ratio * Bt, 2) ** 2
    sinv = np.linalg.norm(np.linalg.inv(Sigma), 2)
    gap_sq = float(np.sum((g_lgd - g_sim) ** 2))
    bound = float(c.b ** 2 * sinv ** 2 * Ez2 * e_t)
    return BoundReport(gap_sq, bound, float(e_t), float(Ez2), float(sinv), c.b,
                       bool(gap_sq <= bound * (1 + 1e-6) + 1e-24))
