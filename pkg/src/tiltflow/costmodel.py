"""Cost oracles and lambda-conditioned cost predictors.

Every cost object answers ``value(X, lam) -> (n,)`` and
``grad(X, lam) -> (n, 2)`` for the scaled cost lam * J(x) (or, for a
predictor, its learned stand-in J_theta(x, lam)).
"""
import csv
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import field2d
from .net import MLP, ScalarEmbedding, TrainState, train_step
from .rng import substream
from .validation import check_points

LAMBDA_RANGE = (0.1, 100.0)


class GridCost:
    """Ground truth lam * bilinear(C, x) with the analytic bilinear gradient."""

    def __init__(self, cost_field):
        self.field = cost_field

    def value(self, X, lam):
        return lam * field2d.interp(self.field, X)

    def grad(self, X, lam):
        return lam * field2d.interp_grad(self.field, X)


class ConstantCost:
    def __init__(self, c=0.0):
        self.c = float(c)

    def value(self, X, lam):
        X = np.asarray(X)
        return np.full(X.shape[:-1], lam * self.c)

    def grad(self, X, lam):
        return np.zeros(np.shape(X))


class QuadraticCost:
    """lam * 0.5 (x - c)^T A (x - c)."""

    def __init__(self, A, center=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        d = self.A.shape[0]
        self.center = np.zeros(d) if center is None else np.asarray(center, dtype=np.float64)

    def value(self, X, lam):
        z = np.asarray(X, dtype=np.float64) - self.center
        return lam * 0.5 * np.einsum("...i,ij,...j->...", z, self.A, z)

    def grad(self, X, lam):
        z = np.asarray(X, dtype=np.float64) - self.center
        return lam * z @ self.A.T


class CostPredictor:
    """J_theta(x, lam): an MLP on [x, embed(ln lam)] with scalar output."""

    def __init__(self, net, embedding=None, lam_range=LAMBDA_RANGE):
        self.net = net
        self.embedding = ScalarEmbedding(6, 0.25, 4.0) if embedding is None else embedding
        lo, hi = lam_range
        if not (0 < lo < hi):
            raise ValueError("lam_range must satisfy 0 < lo < hi")
        self.lam_range = (float(lo), float(hi))
        if net.d_in != 2 + self.embedding.dim or net.d_out != 1:
            raise ValueError("cost net must map 2 + embedding dims to 1")

    @classmethod
    def create(cls, hidden=(64, 64), activation="softplus", seed=0, lam_range=LAMBDA_RANGE):
        emb = ScalarEmbedding(6, 0.25, 4.0)
        return cls(MLP((2 + emb.dim, *hidden, 1), activation, seed=seed), emb, lam_range)

    def _inputs(self, X, lam):
        X = np.asarray(X, dtype=np.float64)
        flat = X.reshape(-1, 2)
        lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), X.shape[:-1]).reshape(-1)
        if np.any(lam <= 0):
            raise ValueError("lambda must be positive")
        return np.concatenate([flat, self.embedding(np.log(lam))], axis=1)

    def value(self, X, lam):
        X = np.asarray(X, dtype=np.float64)
        return self.net.forward(self._inputs(X, lam))[:, 0].reshape(X.shape[:-1])

    def grad(self, X, lam):
        X = np.asarray(X, dtype=np.float64)
        inp = self._inputs(X, lam)
        gin = self.net.vjp_input(inp, np.ones((len(inp), 1)))
        return gin[:, :2].reshape(X.shape)

    def grad_params(self, X, lam, cotangent):
        return self.net.grad_params(self._inputs(X, lam), np.asarray(cotangent)[:, None])

    def copy(self):
        return CostPredictor(self.net.copy(), self.embedding, self.lam_range)

    def to_bytes(self):
        head = np.array(self.lam_range, dtype="<f8").tobytes()
        emb = np.array([self.embedding.n_freq, self.embedding.w_min, self.embedding.w_max], dtype="<f8")
        return b"TFCP" + head + emb.tobytes() + self.net.to_bytes()

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != b"TFCP":
            raise ValueError("not a cost predictor checkpoint")
        lo, hi = np.frombuffer(data, "<f8", 2, 4)
        nf, wmin, wmax = np.frombuffer(data, "<f8", 3, 20)
        net, _ = MLP.from_bytes(data, 44)
        return cls(net, ScalarEmbedding(int(nf), float(wmin), float(wmax)), (lo, hi))


def batch_weights(energies):
    """|B| * softmax(-energies), max-subtracted."""
    e = np.asarray(energies, dtype=np.float64)
    return len(e) * np.exp(log_softmax(-e))


def skl_loss_values(pred, target):
    """Loss value and d loss / d pred for the minibatch SKL estimator.

    ``pred`` is J_theta on the batch, ``target`` is lam * J.
    Returns (loss, grad_exact, grad_stopped).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n = len(pred)
    if n < 2:
        raise ValueError("degenerate batch")
    wj = batch_weights(target)
    wt = batch_weights(pred)
    d = pred - target
    loss = float(np.mean(d * (wj - wt)))
    g_stop = (wj - wt) / n
    pi = wt / n
    g_exact = g_stop + pi * (d - np.dot(pi, d))
    return loss, g_exact, g_stop


def skl_loss_batch(model, X, J, lam, stop_gradient=False):
    X = check_points(X, 2, "batch")
    J = np.asarray(J, dtype=np.float64)
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if len(X) < 2:
        raise ValueError("degenerate batch")
    pred = model.value(X, lam)
    loss, g_exact, g_stop = skl_loss_values(pred, lam * J)
    cot = g_stop if stop_gradient else g_exact
    return loss, model.grad_params(X, lam, cot)


def mse_loss_batch(model, X, J, lam):
    X = check_points(X, 2, "batch")
    d = model.value(X, lam) - lam * np.asarray(J, dtype=np.float64)
    loss = float(np.mean(d * d))
    return loss, model.grad_params(X, lam, 2.0 * d / len(d))


def sample_lambda(rng, lam_range=LAMBDA_RANGE, size=None):
    lo, hi = lam_range
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


def model_tilted_pmf(model, p, lam):
    """q_theta proportional to p * exp(-J_theta(x, lam)) on p's nodes."""
    g = p.geometry
    pred = model.value(g.nodes(), lam).reshape(g.shape)
    return field2d.pmf_from_logits(g, p.log_mass() - pred)


# -- grid-exact functionals ------------------------------------------------

def _tilt_weights(p, energy):
    """w(x) = exp(-E(x)) / E_p exp(-E) on the grid."""
    logw = -energy - np.log(np.sum(p.mass * np.exp(-(energy - energy.min())))) + energy.min()
    return np.exp(logw)


def skl_objective(p, target, pred):
    """KL(q_J || q_theta) + KL(q_theta || q_J) written as E_p[d (w_J - w_theta)].

    ``target`` = lam * C and ``pred`` = J_theta(., lam) as grid arrays.
    """
    d = pred - target
    return float(np.sum(p.mass * d * (_tilt_weights(p, target) - _tilt_weights(p, pred))))


def mse_objective(p, target, pred):
    d = pred - target
    return float(np.sum(p.mass * d * d))


def exp_objective(p, target, pred):
    diff = _tilt_weights(p, target) - _tilt_weights(p, pred)
    return float(np.sum(p.mass * diff * diff))


def variance_p(p, values):
    m = np.sum(p.mass * values)
    return float(np.sum(p.mass * (values - m) ** 2))


# -- training ----------------------------------------------------------------

@dataclass
class CostTrainConfig:
    loss_kind: str = "skl"
    n_steps: int = 3000
    batch_size: int = 256
    step_size: float = 2e-3
    lam_range: Tuple[float, float] = LAMBDA_RANGE
    lam_eval: Sequence[float] = (1.0, 10.0, 100.0)
    eval_interval: int = 100
    stop_gradient: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in ("skl", "mse"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.eval_interval < 1 or self.n_steps < 0:
            raise ValueError("bad step counts")


@dataclass
class CostTrainResult:
    best: CostPredictor
    last: CostPredictor
    best_step: int
    history: List[dict] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)

    @property
    def best_index(self):
        steps = sorted({h["step"] for h in self.history})
        return steps.index(self.best_step)


def grid_metrics(model, p, cost, lam):
    q_real = field2d.tilt(p, cost, lam)
    q_model = model_tilted_pmf(model, p, lam)
    a = field2d.kl(q_real, q_model)
    b = field2d.kl(q_model, q_real)
    return a, b, 0.5 * (a + b)


def train_cost(model, p, cost, config):
    """Train on fresh draws from p; keep the checkpoint with the lowest mean SKL."""
    rng_x = substream(config.seed, "cost.data")
    rng_l = substream(config.seed, "cost.lambda")
    state = TrainState(model.net.n_params, step_size=config.step_size)
    history, losses = [], []
    best, best_step, best_val = model.copy(), 0, np.inf

    def evaluate(step):
        nonlocal best, best_step, best_val
        vals = []
        for lam in config.lam_eval:
            a, b, s = grid_metrics(model, p, cost, lam)
            history.append(dict(step=step, lam_eval=float(lam), kl_real_model=a,
                                kl_model_real=b, skl=s))
            vals.append(s)
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError(f"non-finite SKL at step {step}")
        if np.mean(vals) < best_val:
            best_val, best_step, best = float(np.mean(vals)), step, model.copy()

    for k in range(config.n_steps):
        if k % config.eval_interval == 0:
            evaluate(k)
        X = field2d.sample(p, config.batch_size, rng_x)
        J = field2d.interp(cost, X)
        lam = float(sample_lambda(rng_l, config.lam_range))
        if config.loss_kind == "skl":
            loss, grads = skl_loss_batch(model, X, J, lam, config.stop_gradient)
        else:
            loss, grads = mse_loss_batch(model, X, J, lam)
        train_step(model.net, state, grads)
        losses.append(loss)
    evaluate(config.n_steps)
    return CostTrainResult(best, model.copy(), best_step, history, losses)


def write_metric_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lam_eval", "kl_real_model", "kl_model_real", "skl"])
        for h in history:
            w.writerow([h["step"], repr(h["lam_eval"]), repr(h["kl_real_model"]),
                        repr(h["kl_model_real"]), repr(h["skl"])])


class CostRegressor(BaseEstimator, RegressorMixin):
    """lambda-conditioned cost predictor with an sklearn-style interface.

    ``fit(p, cost)`` takes the data pmf and the ground-truth cost field;
    ``predict(X, lam)`` returns J_theta(x, lam), an estimate of lam * J(x).
    """

    def __init__(self, loss="skl", hidden=(64, 64), activation="softplus", n_steps=3000,
                 batch_size=256, step_size=2e-3, lam_range=LAMBDA_RANGE,
                 lam_eval=(1.0, 10.0, 100.0), eval_interval=100, stop_gradient=False,
                 random_state=0):
        self.loss = loss
        self.hidden = hidden
        self.activation = activation
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.step_size = step_size
        self.lam_range = lam_range
        self.lam_eval = lam_eval
        self.eval_interval = eval_interval
        self.stop_gradient = stop_gradient
        self.random_state = random_state

    def fit(self, p, cost):
        model = CostPredictor.create(self.hidden, self.activation,
                                     seed=substream(self.random_state, "cost.init"),
                                     lam_range=self.lam_range)
        cfg = CostTrainConfig(self.loss, self.n_steps, self.batch_size, self.step_size,
                              self.lam_range, self.lam_eval, self.eval_interval,
                              self.stop_gradient, self.random_state)
        res = train_cost(model, p, cost, cfg)
        self.model_, self.last_model_ = res.best, res.last
        self.history_, self.best_step_ = res.history, res.best_step
        return self

    def predict(self, X, lam=1.0):
        check_is_fitted(self, "model_")
        return self.model_.value(check_points(X, 2), lam)

    def tilted_pmf(self, p, lam):
        check_is_fitted(self, "model_")
        return model_tilted_pmf(self.model_, p, lam)
