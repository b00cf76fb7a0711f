"""Damped secant pairs, compact Jacobian proxy B = gamma I + U Gamma U^T,
its low-rank square root, and the SA-MC sampler state.

Every routine accepts a leading batch axis (one independent B per
trajectory). Unbatched inputs (``gamma`` scalar, ``U`` of shape (d, m)) are
promoted and the result is squeezed back.
"""
from collections import deque
from dataclasses import dataclass, field

import numpy as np

SIGMA2 = 0.2
SIGMA3 = 1.0


@dataclass
class CompactB:
    """B = gamma I + U Gamma U^T for a batch of trajectories.

    gamma: (n,), U: (n, d, m), Gamma: (n, m, m).
    """

    gamma: np.ndarray
    U: np.ndarray
    Gamma: np.ndarray

    @classmethod
    def identity(cls, gamma, dim, n=None):
        g = np.asarray(gamma, dtype=np.float64)
        if n is not None:
            g = np.broadcast_to(g, (n,)).copy()
        g = np.atleast_1d(g)
        nb = g.shape[0]
        return cls(g, np.zeros((nb, dim, 0)), np.zeros((nb, 0, 0)))

    @classmethod
    def single(cls, gamma, U, Gamma):
        U = np.asarray(U, dtype=np.float64)
        Gamma = np.asarray(Gamma, dtype=np.float64)
        if U.ndim == 1:
            U = U[:, None]
        Gamma = np.atleast_2d(Gamma) if Gamma.size else Gamma.reshape(0, 0)
        return cls(np.array([float(gamma)]), U[None], Gamma[None])

    @property
    def n(self):
        return self.U.shape[0]

    @property
    def dim(self):
        return self.U.shape[1]

    @property
    def rank(self):
        return self.U.shape[2]

    def dense(self):
        d = self.dim
        out = self.gamma[:, None, None] * np.eye(d)
        if self.rank:
            out = out + self.U @ self.Gamma @ self.U.transpose(0, 2, 1)
        return out

    def nbytes(self):
        return self.gamma.nbytes + self.U.nbytes + self.Gamma.nbytes


def _batched(x, n):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return np.broadcast_to(x, (n, x.size)), True
    return x, False


def apply_B(B, x):
    """gamma x + U Gamma (U^T x), O(dm + m^2) per trajectory."""
    X, single = _batched(x, B.n)
    out = B.gamma[:, None] * X
    if B.rank:
        c = np.einsum("ndm,nd->nm", B.U, X)
        out = out + np.einsum("ndm,nm->nd", B.U, np.einsum("nij,nj->ni", B.Gamma, c))
    return out[0] if single and B.n == 1 else out


def damp(y, s, B, sigma2=SIGMA2, sigma3=SIGMA3):
    """Damped target y_hat = phi y + (1 - phi) B s keeping curvature in band.

    Returns (y_hat, phi, sBs). Rows whose s is exactly zero are passed
    through with phi = 1 (callers skip them).
    """
    if not (0 < sigma2 < 1) or sigma3 <= 0:
        raise ValueError("need 0 < sigma2 < 1 and sigma3 > 0")
    Y, single = _batched(y, B.n)
    S, _ = _batched(s, B.n)
    Bs = apply_B(B, S)
    Bs = np.atleast_2d(Bs)
    sBs = np.einsum("nd,nd->n", S, Bs)
    live = np.einsum("nd,nd->n", S, S) > 0
    if np.any(sBs[live] <= 0) or not np.all(np.isfinite(sBs)):
        raise FloatingPointError("B lost positive definiteness")
    sy = np.einsum("nd,nd->n", S, Y)
    tau = np.where(live, sy / np.where(live, sBs, 1.0), 1.0)
    phi = np.ones_like(tau)
    lo = tau < 1 - sigma2
    hi = tau > 1 + sigma3
    phi[lo] = sigma2 / (1 - tau[lo])
    phi[hi] = sigma3 / (tau[hi] - 1)
    y_hat = phi[:, None] * Y + (1 - phi[:, None]) * Bs
    if single and B.n == 1:
        return y_hat[0], float(phi[0]), float(sBs[0])
    return y_hat, phi, sBs


@dataclass
class SecantPair:
    """One damped pair per trajectory; rows with ``live`` False are skipped."""

    s: np.ndarray
    y_hat: np.ndarray
    u: float
    w: float
    live: np.ndarray = None

    def __post_init__(self):
        self.s = np.atleast_2d(np.asarray(self.s, dtype=np.float64))
        self.y_hat = np.atleast_2d(np.asarray(self.y_hat, dtype=np.float64))
        if self.live is None:
            self.live = np.ones(self.s.shape[0], dtype=bool)


class MemoryQueue:
    """FIFO of the most recent ``capacity`` secant pairs (oldest first)."""

    def __init__(self, capacity=8):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._items = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def push(self, pair):
        evicted = len(self._items) == self.capacity
        self._items.append(pair)
        return evicted

    def nbytes(self):
        return sum(p.s.nbytes + p.y_hat.nbytes for p in self._items)


def push_pair(queue, pair):
    queue.push(pair)
    return queue


def update_B(queue, gamma_init, return_residual=False, dim=None):
    """Replay the queue from gamma_init * I using the compact recursion.

    With ``return_residual`` also returns, per trajectory, the relative
    secant residual |B~ s - y_hat| / |y_hat| of the newest pair measured
    before its affine rescale.
    """
    pairs = list(queue)
    g0 = np.atleast_1d(np.asarray(gamma_init, dtype=np.float64))
    if np.any(g0 <= 0):
        raise ValueError("gamma_init must be positive")
    if not pairs:
        if dim is None:
            raise ValueError("empty queue needs an explicit dim")
        B = CompactB(g0.copy(), np.zeros((g0.size, dim, 0)), np.zeros((g0.size, 0, 0)))
        return (B, np.zeros(g0.size)) if return_residual else B
    n, d = pairs[0].s.shape
    gamma = np.broadcast_to(g0, (n,)).copy()
    U = np.zeros((n, d, 0))
    G = np.zeros((n, 0, 0))
    resid = np.zeros(n)
    for idx, pr in enumerate(pairs):
        s = np.where(pr.live[:, None], pr.s, 0.0)
        y = np.where(pr.live[:, None], pr.y_hat, 0.0)
        ys = np.einsum("nd,nd->n", y, s)
        if np.any(ys[pr.live] <= 0):
            raise FloatingPointError("curvature violated")
        rho = np.where(pr.live, 1.0 / np.where(pr.live, ys, 1.0), 0.0)
        ss = np.einsum("nd,nd->n", s, s)
        m = U.shape[2]
        p = np.einsum("nij,nj->ni", G, np.einsum("ndm,nd->nm", U, s))
        tau = np.einsum("ndm,nm,nd->n", U, p, s) if m else np.zeros(n)
        Gn = np.zeros((n, m + 2, m + 2))
        Gn[:, :m, :m] = G
        Gn[:, :m, m + 1] = -rho[:, None] * p
        Gn[:, m + 1, :m] = -rho[:, None] * p
        Gn[:, m, m + 1] = Gn[:, m + 1, m] = -gamma * rho
        Gn[:, m + 1, m + 1] = rho + rho * rho * (tau + gamma * ss)
        U = np.concatenate([U, s[:, :, None], y[:, :, None]], axis=2)
        G = Gn
        if return_residual and idx == len(pairs) - 1:
            Bt = CompactB(gamma, U, G)
            r = apply_B(Bt, s) - y
            den = np.linalg.norm(y, axis=1)
            resid = np.where(pr.live, np.linalg.norm(r, axis=1) / np.where(den > 0, den, 1.0), 0.0)
        G = pr.u * G
        gamma = pr.u * gamma + pr.w
    B = CompactB(gamma, U, 0.5 * (G + G.transpose(0, 2, 1)))
    return (B, resid) if return_residual else B


@dataclass
class SqrtFactor:
    """L = sqrt(gamma) I + Q core Q^T with core = L_C - sqrt(gamma) I."""

    sqrt_gamma: np.ndarray
    Q: np.ndarray
    core: np.ndarray
    jitter: np.ndarray = None
    fallback: np.ndarray = None

    def nbytes(self):
        return self.sqrt_gamma.nbytes + self.Q.nbytes + self.core.nbytes


JITTER_START = 1e-10
JITTER_MAX = 1e-4


def semi_numerical_sqrt(B):
    """Factor B = L L^T through a reduced QR of U and a small Cholesky.

    Cholesky failures escalate a diagonal jitter from 1e-10 * max(1, tr C / k)
    by factors of ten up to 1e-4; past that the trajectory falls back to the
    isotropic factor sqrt(gamma) I and ``fallback`` is flagged.
    """
    if np.any(B.gamma <= 0):
        raise FloatingPointError("B lost positive definiteness")
    n, d, m = B.U.shape
    sg = np.sqrt(B.gamma)
    jitter = np.zeros(n)
    fallback = np.zeros(n, dtype=bool)
    if m == 0:
        return SqrtFactor(sg, np.zeros((n, d, 0)), np.zeros((n, 0, 0)), jitter, fallback)
    Q, R = np.linalg.qr(B.U)
    k = Q.shape[2]
    eye = np.eye(k)
    C = B.gamma[:, None, None] * eye + R @ B.Gamma @ R.transpose(0, 2, 1)
    C = 0.5 * (C + C.transpose(0, 2, 1))
    LC = np.zeros_like(C)
    pending = np.ones(n, dtype=bool)
    try:
        LC = np.linalg.cholesky(C)
        pending[:] = ~np.all(np.isfinite(LC), axis=(1, 2))
    except np.linalg.LinAlgError:
        pass
    if pending.any():
        for i in np.flatnonzero(pending):
            scale = max(1.0, np.trace(C[i]) / k)
            eps = JITTER_START * scale
            done = False
            try:
                LC[i] = np.linalg.cholesky(C[i])
                done = True
            except np.linalg.LinAlgError:
                pass
            while not done and eps <= JITTER_MAX * scale * (1 + 1e-12):
                try:
                    LC[i] = np.linalg.cholesky(C[i] + eps * eye)
                    jitter[i] = eps
                    done = True
                except np.linalg.LinAlgError:
                    eps *= 10
            if not done:
                LC[i] = sg[i] * eye
                fallback[i] = True
    core = LC - sg[:, None, None] * eye
    return SqrtFactor(sg, Q, core, jitter, fallback)


def apply_L(F, eps):
    """sqrt(gamma) x + Q core (Q^T x); ``eps`` may carry extra sample axes.

    Shapes: (n, d) or (n, S, d) with the trajectory axis first.
    """
    X = np.asarray(eps, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None]
    squeeze = X.ndim == 2
    if squeeze:
        X = X[:, None, :]
    out = F.sqrt_gamma[:, None, None] * X
    if F.Q.shape[2]:
        c = np.einsum("ndk,nsd->nsk", F.Q, X)
        c = np.einsum("nij,nsj->nsi", F.core, c)
        out = out + np.einsum("ndk,nsk->nsd", F.Q, c)
    if squeeze:
        out = out[:, 0, :]
    return out[0] if single else out


def apply_LT(F, eps):
    X = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    out = F.sqrt_gamma[:, None] * X
    if F.Q.shape[2]:
        c = np.einsum("ndk,nd->nk", F.Q, X)
        c = np.einsum("nji,nj->ni", F.core, c)
        out = out + np.einsum("ndk,nk->nd", F.Q, c)
    return out


# -- SA-MC state ---------------------------------------------------------

@dataclass
class SecantState:
    """Per-trajectory SA-MC memory, stored batched."""

    queue: MemoryQueue
    B: CompactB
    x_prev: np.ndarray = None
    v_prev: np.ndarray = None
    t_prev: float = None
    events: list = field(default_factory=list)

    @classmethod
    def create(cls, n, dim, gamma0, memory=8):
        return cls(MemoryQueue(memory), CompactB.identity(gamma0, dim, n))

    def nbytes_per_trajectory(self):
        total = self.B.nbytes() + self.queue.nbytes()
        if self.x_prev is not None:
            total += self.x_prev.nbytes + self.v_prev.nbytes
        return total / self.B.n


def secant_update(state, x, v, t, sched, sigma2=SIGMA2, sigma3=SIGMA3, damping=True):
    """Form the pair from the previous step, damp, push, and rebuild B.

    Returns a diagnostics dict (per-trajectory arrays). The first call only
    stores (x, v, t).
    """
    diag = {}
    if state.x_prev is not None:
        s = x - state.x_prev
        r = v - state.v_prev
        tk = state.t_prev
        y = (-sched.a(tk) * s + r) / sched.b(tk)
        s_norm = np.linalg.norm(s, axis=1)
        live = s_norm > 1e-12 * (1 + np.linalg.norm(state.x_prev, axis=1))
        s_safe = np.where(live[:, None], s, 0.0)
        if damping:
            y_hat, phi, sBs = damp(y, s_safe, state.B, sigma2, sigma3)
        else:
            y_hat, phi = y, np.ones(len(s))
            sBs = np.einsum("nd,nd->n", s_safe, np.atleast_2d(apply_B(state.B, s_safe)))
        sy = np.einsum("nd,nd->n", s_safe, y_hat)
        band_lo = sy - (1 - sigma2) * sBs
        band_hi = (1 + sigma3) * sBs - sy
        ss = np.einsum("nd,nd->n", s_safe, s_safe)
        gamma_hat = np.where(live, sy / np.where(live, ss, 1.0), state.B.gamma)
        if np.any(gamma_hat[live] <= 0):
            raise FloatingPointError("curvature violated")
        sc = sched.step_coeffs(tk, t)
        state.queue.push(SecantPair(s_safe, y_hat, sc.u, sc.w, live))
        state.B, resid = update_B(state.queue, gamma_hat, return_residual=True)
        diag = dict(phi=phi, gamma=state.B.gamma.copy(), m=state.B.rank,
                    secant_residual=resid, band_lo=band_lo, band_hi=band_hi,
                    scale=sBs, live=live, skipped=int((~live).sum()))
        if (~live).any():
            state.events.append(("skipped_pair", t, int((~live).sum())))
    state.x_prev, state.v_prev, state.t_prev = x.copy(), v.copy(), t
    return diag
