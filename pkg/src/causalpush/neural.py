"""Dense MLP substrate: ELU hidden layers, linear head, Adam, gradient checks.

Parameters live in one flat float64 vector so that optimizers, gradient-norm
clipping and the checkpoint serializer never need to know the layer layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np


def elu(x):
    neg = np.minimum(x, 0.0)
    np.expm1(neg, out=neg)
    neg += np.maximum(x, 0.0)
    return neg


def elu_grad_from_output(y):
    """ELU derivative expressed through the activation ``y = elu(x)``."""
    return np.minimum(y, 0.0) + 1.0


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output, e.g. ``(17, 128, 64, 3)``."""

    layer_sizes: Tuple[int, ...]
    hidden_gain: float = float(np.sqrt(2.0))
    output_gain: float = 1.0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 3:
            raise ValueError("an MLP needs an input, at least one hidden layer and an output")
        if min(sizes) < 1:
            raise ValueError(f"layer sizes must be >= 1, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def shapes(self) -> List[Tuple[Tuple[int, int], Tuple[int]]]:
        s = self.layer_sizes
        return [((s[i], s[i + 1]), (s[i + 1],)) for i in range(len(s) - 1)]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for (a, b), _ in self.shapes)


@dataclass
class Params:
    spec: MlpSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.spec.n_params,):
            raise ValueError(
                f"parameter vector has length {self.flat.size}, spec needs {self.spec.n_params}"
            )

    def layers(self, flat=None):
        """(W, b) views into ``flat`` (defaults to the parameters themselves)."""
        flat = self.flat if flat is None else flat
        out = []
        offset = 0
        for (n_in, n_out), _ in self.spec.shapes:
            w = flat[offset:offset + n_in * n_out].reshape(n_in, n_out)
            offset += n_in * n_out
            b = flat[offset:offset + n_out]
            offset += n_out
            out.append((w, b))
        return out

    def copy(self) -> "Params":
        return Params(self.spec, self.flat.copy())


def _orthogonal(rng, n_in, n_out, gain):
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def init_params(spec: MlpSpec, seed) -> Params:
    """Orthogonal weights (gain sqrt(2) hidden, ``spec.output_gain`` last), zero biases."""
    rng = np.random.default_rng(seed)
    params = Params(spec, np.zeros(spec.n_params))
    layers = params.layers()
    for i, (w, _) in enumerate(layers):
        gain = spec.output_gain if i == len(layers) - 1 else spec.hidden_gain
        w[...] = _orthogonal(rng, w.shape[0], w.shape[1], gain)
    return params


def forward(params: Params, x, return_cache=False, dtype=np.float64):
    """Batch forward pass; ``dtype=np.float32`` gives a cheaper inference-only path."""
    x = np.asarray(x, dtype=dtype)
    n_in = params.spec.layer_sizes[0]
    if x.shape[-1] != n_in:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {n_in}")
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    layers = params.layers() if dtype == np.float64 else params.layers(params.flat.astype(dtype))
    cache = [h]
    for i, (w, b) in enumerate(layers):
        z = h @ w
        z += b
        if i < len(layers) - 1:
            h = elu(z)
            cache.append(h)
        else:
            h = z
    y = h[0] if squeeze else h
    if return_cache:
        return y, cache
    return y


def backward(params: Params, cache, upstream, need_input_grad=False):
    """Reverse-mode pass for the sum over the batch of ``upstream . y``.

    Returns the flat parameter gradient, plus d/dx when ``need_input_grad``.
    """
    layers = params.layers()
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (cache[0].shape[0], params.spec.layer_sizes[-1]):
        raise ValueError(f"upstream gradient has shape {g.shape}")
    grad = np.zeros_like(params.flat)
    grad_layers = params.layers(grad)
    n = len(layers)
    for i in range(n - 1, -1, -1):
        h_in = cache[i]
        gw, gb = grad_layers[i]
        gw[...] = h_in.T @ g
        gb[...] = g.sum(axis=0)
        if i > 0 or need_input_grad:
            g = g @ layers[i][0].T
            if i > 0:
                g *= elu_grad_from_output(cache[i])
    if need_input_grad:
        return grad, g
    return grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, lr=1e-3, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray):
    """One bias-corrected Adam update; returns ``(new_state, new_params)``."""
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_state, new_params


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float):
    """Scale a group of gradient vectors to a joint L2 norm of at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.dot(g, g)) for g in grads)))
    if total > max_norm and total > 0:
        scale = max_norm / total
        return [g * scale for g in grads], total
    return list(grads), total


def finite_difference_grad(loss_fn, flat, h=1e-5):
    """Central-difference gradient of a scalar ``loss_fn(flat)``."""
    flat = np.array(flat, dtype=np.float64)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn(flat)
        flat[i] = old - h
        down = loss_fn(flat)
        flat[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(a, b, floor=1e-8):
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


@dataclass
class Mlp:
    """Small convenience bundle of params and their optimizer state."""

    params: Params
    opt: AdamState = field(default=None)

    @classmethod
    def create(cls, sizes, seed, lr=1e-3, output_gain=1.0) -> "Mlp":
        p = init_params(MlpSpec(tuple(sizes), output_gain=output_gain), seed)
        return cls(p, AdamState.zeros(p.spec.n_params, lr=lr))

    def __call__(self, x):
        return forward(self.params, x)

    def apply_grads(self, grads):
        self.opt, flat = adam_step(self.opt, self.params.flat, grads)
        self.params = Params(self.params.spec, flat)
