"""Conditional flow matching on the rectified-linear path, and ODE sampling."""
import csv
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import field2d
from .net import MLP, ScalarEmbedding, TrainState, train_step
from .rng import as_generator, substream
from .schedule import Schedule
from .validation import check_points


class VelocityModel:
    """v_theta(x, t): an MLP fed with [x, embed(t)]."""

    def __init__(self, net, sched=None, embedding=None):
        self.net = net
        self.schedule = Schedule() if sched is None else sched
        self.embedding = ScalarEmbedding() if embedding is None else embedding
        if net.d_in != 2 + self.embedding.dim or net.d_out != 2:
            raise ValueError("velocity net must map 2 + embedding dims to 2")

    @classmethod
    def create(cls, hidden=(128, 128, 128), activation="tanh", seed=0, n_freq=6,
               sched=None):
        emb = ScalarEmbedding(n_freq=n_freq, w_min=1.0, w_max=32.0)
        net = MLP((2 + emb.dim, *hidden, 2), activation, seed=seed, zero_final=True)
        return cls(net, sched, emb)

    def _inputs(self, X, t):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (X.shape[0],))
        return np.concatenate([X, self.embedding(t)], axis=1)

    def velocity(self, X, t):
        return self.net.forward(self._inputs(X, t))

    def velocity_vjp(self, X, t, cotangent):
        """cotangent^T dv/dx (time treated as a constant)."""
        gin = self.net.vjp_input(self._inputs(X, t), cotangent)
        return gin[:, :2]

    def to_bytes(self):
        e = self.embedding
        head = np.array([e.n_freq, e.w_min, e.w_max, self.schedule.eps_t], dtype="<f8")
        return b"TFVM" + head.tobytes() + self.net.to_bytes()

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != b"TFVM":
            raise ValueError("not a velocity model checkpoint")
        nf, wmin, wmax, eps_t = np.frombuffer(data, "<f8", 4, 4)
        net, _ = MLP.from_bytes(data, 36)
        return cls(net, Schedule(eps_t=float(eps_t)),
                   ScalarEmbedding(int(nf), float(wmin), float(wmax)))


@dataclass
class SamplerTrace:
    """Per-step record of a generation run (batched over trajectories)."""

    step: int
    t: float
    x: np.ndarray
    v: np.ndarray
    g: np.ndarray
    dt: float
    diag: dict = field(default_factory=dict)


@dataclass
class OdeConfig:
    n_steps: int = 100
    integrator: str = "euler"
    t_start: float = 0.0
    t_end: float = 0.98
    final_jump: bool = True

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.integrator not in ("euler", "midpoint"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if not (0.0 <= self.t_start < self.t_end < 1.0):
            raise ValueError("need 0 <= t_start < t_end < 1")

    def grid(self):
        """(t_k, t_{k+1}) pairs; with final_jump the last step lands on t = 1."""
        ts = np.linspace(self.t_start, self.t_end, self.n_steps + 1)
        steps = list(zip(ts[:-1], ts[1:]))
        if self.final_jump:
            steps.append((ts[-1], 1.0))
        return [(float(a), float(b)) for a, b in steps]


def cfm_loss_batch(model, x1, rng):
    """Squared-error flow-matching loss and its exact parameter gradient."""
    x1 = check_points(x1, 2, "x1")
    rng = as_generator(rng, "flow.cfm")
    n = len(x1)
    x0 = rng.standard_normal((n, 2))
    t = rng.random(n)
    xt = t[:, None] * x1 + (1 - t[:, None]) * x0
    inputs = model._inputs(xt, t)
    resid = model.net.forward(inputs) - (x1 - x0)
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite flow-matching loss")
    grads = model.net.grad_params(inputs, 2.0 * resid / n)
    return loss, grads


def _draw(data, n, rng):
    if isinstance(data, field2d.GridPmf):
        return field2d.sample(data, n, rng)
    idx = rng.integers(0, len(data), n)
    return data[idx]


@dataclass
class FlowTrainConfig:
    n_steps: int = 4000
    batch_size: int = 512
    step_size: float = 2e-3
    final_step_size: float = 1e-4
    log_every: int = 100
    seed: int = 0


def train_flow(model, data, config):
    """Adam on the CFM loss with cosine step-size decay.

    Returns the model (trained in place) and the mean loss of each block of
    ``log_every`` steps.
    """
    if not isinstance(data, field2d.GridPmf):
        data = check_points(data, 2, "data")
    rng_data = substream(config.seed, "flow.data")
    rng_loss = substream(config.seed, "flow.loss")
    state = TrainState(model.net.n_params, step_size=config.step_size)
    history, block = [], []
    for k in range(config.n_steps):
        frac = k / max(config.n_steps - 1, 1)
        lr = config.final_step_size + 0.5 * (config.step_size - config.final_step_size) * (1 + np.cos(np.pi * frac))
        batch = _draw(data, config.batch_size, rng_data)
        loss, grads = cfm_loss_batch(model, batch, rng_loss)
        train_step(model.net, state, grads, step_size=lr)
        block.append(loss)
        if len(block) == config.log_every or k == config.n_steps - 1:
            history.append(float(np.mean(block)))
            block = []
    return model, history


def integrate(model, x0, config, guidance=None, record=False):
    """Integrate dx/dt = v(x, t) + g(x, t) over the configured grid.

    ``guidance`` is a callable ``(k, t, t_next, x, v) -> (g, diag)``; it is
    evaluated once per step at the left endpoint.
    """
    x = np.array(x0, dtype=np.float64)
    traces = []
    for k, (t, t_next) in enumerate(config.grid()):
        dt = t_next - t
        v = model.velocity(x, t)
        if guidance is None:
            g, diag = np.zeros_like(x), {}
        else:
            g, diag = guidance(k, t, t_next, x, v)
        drift = v + g
        if config.integrator == "midpoint":
            x_mid = x + 0.5 * dt * drift
            drift = model.velocity(x_mid, t + 0.5 * dt) + g
        x_next = x + dt * drift
        if not np.all(np.isfinite(x_next)):
            raise FloatingPointError(f"trajectory diverged at step {k}")
        if record:
            traces.append(SamplerTrace(k, t, x, v, g, dt, diag))
        x = x_next
    return x, traces


def sample_ode(model, n, config=None, rng=None, record=False):
    """Unguided generation from standard normal noise."""
    config = OdeConfig() if config is None else config
    rng = as_generator(rng, "flow.sample")
    x0 = rng.standard_normal((int(n), 2))
    return integrate(model, x0, config, record=record)


def write_trace_csv(traces, path, trajectory=0):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "x", "y", "v_norm", "g_norm"])
        for tr in traces:
            x = tr.x[trajectory]
            w.writerow([tr.step, repr(tr.t), repr(float(x[0])), repr(float(x[1])),
                        repr(float(np.linalg.norm(tr.v[trajectory]))),
                        repr(float(np.linalg.norm(tr.g[trajectory])))])


class FlowMatcher(BaseEstimator):
    """Flow-matching generative model with an sklearn-style interface.

    ``fit`` accepts an (n, 2) array of data points or a :class:`GridPmf`
    (fresh jittered draws every step). ``sample`` integrates the learned ODE.
    """

    def __init__(self, hidden=(128, 128, 128), activation="tanh", n_freq=6,
                 n_steps=4000, batch_size=512, step_size=2e-3, final_step_size=1e-4,
                 eps_t=1e-3, random_state=0):
        self.hidden = hidden
        self.activation = activation
        self.n_freq = n_freq
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.step_size = step_size
        self.final_step_size = final_step_size
        self.eps_t = eps_t
        self.random_state = random_state

    def fit(self, X, y=None):
        model = VelocityModel.create(self.hidden, self.activation,
                                     seed=substream(self.random_state, "flow.init"),
                                     n_freq=self.n_freq, sched=Schedule(eps_t=self.eps_t))
        cfg = FlowTrainConfig(self.n_steps, self.batch_size, self.step_size,
                              self.final_step_size, seed=self.random_state)
        self.model_, self.loss_history_ = train_flow(model, X, cfg)
        return self

    def sample(self, n, ode_config=None, rng=None):
        check_is_fitted(self, "model_")
        return sample_ode(self.model_, n, ode_config, rng)[0]

    def velocity(self, X, t):
        check_is_fitted(self, "model_")
        return self.model_.velocity(check_points(X, 2), t)
