"""Feed-forward networks with hand-written backprop, plus Adam.

Parameters live in one flat float64 vector. Layout, per layer in order:
the weight matrix of shape (fan_in, fan_out) in row-major order, then the
bias of length fan_out. Inputs are batches of shape (n, d_in).
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import as_generator

_MAGIC = b"TFNN"
_VERSION = 1
_ACTIVATIONS = {"tanh": 0, "softplus": 1}


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.logaddexp(0.0, z)


def _act_deriv(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    return 0.5 * (1.0 + np.tanh(0.5 * z))  # logistic, overflow-free


class MLP:
    """Multilayer perceptron with C^1 activations.

    Parameters
    ----------
    widths : sequence of int
        ``[d_in, hidden..., d_out]``.
    activation : {"tanh", "softplus"}
    seed : int or Generator
        Initialization randomness (fan-in scaled uniform).
    zero_final : bool
        Zero the last layer so the network starts as the constant 0.
    """

    def __init__(self, widths, activation="tanh", seed=0, zero_final=False, params=None):
        self.widths = tuple(int(w) for w in widths)
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError("widths needs at least input and output sizes")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.n_params = sum((a + 1) * b for a, b in zip(self.widths[:-1], self.widths[1:]))
        if params is not None:
            params = np.asarray(params, dtype=np.float64).copy()
            if params.shape != (self.n_params,):
                raise ValueError("parameter vector has the wrong length")
            self.params = params
        else:
            self.params = self._init(seed, zero_final)

    @property
    def d_in(self):
        return self.widths[0]

    @property
    def d_out(self):
        return self.widths[-1]

    def _init(self, seed, zero_final):
        rng = as_generator(seed, "net.init")
        chunks = []
        last = len(self.widths) - 2
        for k, (fi, fo) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            if zero_final and k == last:
                chunks += [np.zeros(fi * fo), np.zeros(fo)]
            else:
                bound = 1.0 / np.sqrt(fi)
                chunks += [rng.uniform(-bound, bound, fi * fo), rng.uniform(-bound, bound, fo)]
        return np.concatenate(chunks)

    def layers(self, params=None):
        """(W, b) views into a flat parameter (or gradient) vector."""
        flat = self.params if params is None else params
        out, off = [], 0
        for fi, fo in zip(self.widths[:-1], self.widths[1:]):
            W = flat[off:off + fi * fo].reshape(fi, fo)
            off += fi * fo
            b = flat[off:off + fo]
            off += fo
            out.append((W, b))
        return out

    def _check(self, X, cols, name):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.ndim != 2 or X.shape[1] != cols:
            raise ValueError(f"{name} dimension mismatch: expected {cols}, got {X.shape}")
        return X, single

    def _forward(self, X):
        acts, pre = [X], []
        layers = self.layers()
        h = X
        for k, (W, b) in enumerate(layers):
            z = h @ W + b
            if k < len(layers) - 1:
                pre.append(z)
                h = _act(self.activation, z)
                acts.append(h)
            else:
                h = z
        return h, acts, pre

    def forward(self, X):
        X, single = self._check(X, self.d_in, "input")
        out = self._forward(X)[0]
        return out[0] if single else out

    __call__ = forward

    def backward(self, X, cotangent, need_input=True, need_params=True):
        """Return (input cotangent, summed parameter gradient) in one pass."""
        X, single = self._check(X, self.d_in, "input")
        C, _ = self._check(cotangent, self.d_out, "cotangent")
        if C.shape[0] != X.shape[0]:
            raise ValueError("batch size mismatch between input and cotangent")
        _, acts, pre = self._forward(X)
        layers = self.layers()
        grad = np.zeros(self.n_params) if need_params else None
        glayers = self.layers(grad) if need_params else None
        delta = C
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            if need_params:
                gW, gb = glayers[k]
                gW += acts[k].T @ delta
                gb += delta.sum(0)
            if k == 0 and not need_input:
                break
            delta = delta @ W.T
            if k > 0:
                delta = delta * _act_deriv(self.activation, pre[k - 1], acts[k])
        gin = None
        if need_input:
            gin = delta[0] if single else delta
        return gin, grad

    def vjp_input(self, X, cotangent):
        return self.backward(X, cotangent, need_params=False)[0]

    def grad_params(self, X, cotangent):
        return self.backward(X, cotangent, need_input=False)[1]

    def copy(self):
        return MLP(self.widths, self.activation, params=self.params)

    # -- checkpoint -------------------------------------------------------

    def to_bytes(self):
        head = _MAGIC + struct.pack("<3I", _VERSION, len(self.widths), _ACTIVATIONS[self.activation])
        head += struct.pack(f"<{len(self.widths)}I", *self.widths)
        return head + np.ascontiguousarray(self.params, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, data, offset=0):
        if data[offset:offset + 4] != _MAGIC:
            raise ValueError("not a TFNN checkpoint")
        version, nl, act = struct.unpack_from("<3I", data, offset + 4)
        if version != _VERSION:
            raise ValueError(f"unsupported TFNN version {version}")
        widths = struct.unpack_from(f"<{nl}I", data, offset + 16)
        act_name = {v: k for k, v in _ACTIVATIONS.items()}[act]
        start = offset + 16 + 4 * nl
        net = cls(widths, act_name, params=np.zeros(sum((a + 1) * b for a, b in zip(widths[:-1], widths[1:]))))
        net.params = np.frombuffer(data, dtype="<f8", count=net.n_params, offset=start).copy()
        return net, start + 8 * net.n_params


def forward(net, X):
    return net.forward(X)


def vjp_input(net, X, cotangent):
    return net.vjp_input(X, cotangent)


def grad_params(net, X, cotangent):
    return net.grad_params(X, cotangent)


@dataclass(frozen=True)
class ScalarEmbedding:
    """Maps a scalar to [s, sin(w_k s), cos(w_k s)] with a geometric ladder w_k."""

    n_freq: int = 6
    w_min: float = 1.0
    w_max: float = 32.0

    @property
    def dim(self):
        return 2 * self.n_freq + 1

    def freqs(self):
        if self.n_freq == 0:
            return np.zeros(0)
        return np.geomspace(self.w_min, self.w_max, self.n_freq)

    def __call__(self, s, n=None):
        s = np.asarray(s, dtype=np.float64)
        if s.ndim == 0:
            s = np.full(1 if n is None else n, float(s))
        ang = s[:, None] * self.freqs()[None, :]
        return np.concatenate([s[:, None], np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class TrainState:
    """Adam accumulators."""

    n_params: int
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)


def train_step(net, state, grads, step_size=None):
    """One bias-corrected Adam update, in place; returns (net, state)."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != net.params.shape:
        raise ValueError("gradient length does not match parameter count")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("gradient overflow")
    lr = state.step_size if step_size is None else step_size
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    net.params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return net, state
