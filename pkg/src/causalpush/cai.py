"""Causal action influence of the robot on the object.

The score at a state is the average KL divergence between each
action-conditioned next-object-position Gaussian and the mixture of all of
them, with the actions drawn from a box of achievable velocities around the
robot's current velocity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, TransformerMixin

from .sim2d import ACTION_HIGH, ACTION_LOW, HLState
from .validation import check_states


@dataclass(frozen=True)
class CaiConfig:
    n_actions: int = 64
    delta_v: tuple = (0.3, 0.3, 0.4)
    inference_dtype: type = np.float32

    def __post_init__(self):
        if self.n_actions < 2:
            raise ValueError("need at least two sampled actions")
        if min(self.delta_v) <= 0:
            raise ValueError("velocity deviation box must be positive in every component")


def sample_achievable_actions(v_r, cfg: CaiConfig, rng):
    """``(n, K, 3)`` uniform draws from ``v_r +/- delta_v``, clipped to the command range."""
    v = np.atleast_2d(np.asarray(v_r, dtype=np.float64))
    delta = np.asarray(cfg.delta_v, dtype=np.float64)
    u = rng.uniform(-1.0, 1.0, size=(v.shape[0], cfg.n_actions, 3))
    return np.clip(v[:, None, :] + u * delta, ACTION_LOW, ACTION_HIGH)


def gaussian_kl(mu_a, mu_b, sigma):
    """KL between isotropic Gaussians sharing standard deviation ``sigma``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = np.asarray(mu_a, dtype=np.float64) - np.asarray(mu_b, dtype=np.float64)
    return np.sum(d * d, axis=-1) / (2.0 * sigma * sigma)


def kl_to_mixture(mu_i, mus, sigma):
    """Variational approximation of KL(N(mu_i) || uniform mixture of N(mus)).

    ``-log mean_k exp(-KL(N(mu_i) || N(mu_k)))``; ``mus`` is ``(..., K, 2)``.
    """
    mus = np.asarray(mus, dtype=np.float64)
    kl = gaussian_kl(np.asarray(mu_i)[..., None, :], mus, sigma)
    k = mus.shape[-2]
    return np.log(k) - logsumexp(-kl, axis=-1)


def mixture_cai(mus, sigma):
    """Average over components of each component's KL to the mixture; ``mus`` is ``(..., K, 2)``."""
    mus = np.asarray(mus, dtype=np.float64)
    c = mus - mus.mean(axis=-2, keepdims=True)
    sq = np.sum(c * c, axis=-1)
    d2 = sq[..., :, None] + sq[..., None, :] - 2.0 * (c @ np.swapaxes(c, -1, -2))
    np.maximum(d2, 0.0, out=d2)
    kl = d2 / (-2.0 * sigma * sigma)
    # the k == i term contributes exp(0), so the inner mean lies in [1/K, 1]
    np.expm1(kl, out=kl)
    per_i = -np.log1p(kl.mean(axis=-1))
    return np.maximum(per_i.mean(axis=-1), 0.0)


def cai_score(model, s_h, cfg: CaiConfig, rng):
    """Monte-Carlo influence estimate for each state in the batch, in nats."""
    arr = s_h.to_array() if isinstance(s_h, HLState) else np.asarray(s_h, dtype=np.float64)
    arr = np.atleast_2d(arr)
    actions = sample_achievable_actions(arr[:, 6:9], cfg, rng)
    n, k = actions.shape[:2]
    X = np.concatenate([np.repeat(arr, k, axis=0), actions.reshape(n * k, 3)], axis=1)
    mus = model.base(X) + model.residual(X, dtype=cfg.inference_dtype)
    return mixture_cai(mus.reshape(n, k, 2), model.sigma)


class CausalActionInfluence(BaseEstimator, TransformerMixin):
    """Transformer mapping high-level states ``(n, 12)`` to influence scores ``(n, 1)``."""

    def __init__(self, model=None, n_actions=64, delta_v=(0.3, 0.3, 0.4), random_state=None):
        self.model = model
        self.n_actions = n_actions
        self.delta_v = delta_v
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValueError("a transition model is required")
        self.config_ = CaiConfig(self.n_actions, tuple(self.delta_v))
        self.rng_ = np.random.default_rng(self.random_state)
        return self

    def score_samples(self, X):
        if not hasattr(self, "config_"):
            self.fit()
        return cai_score(self.model, check_states(X), self.config_, self.rng_)

    def transform(self, X):
        return self.score_samples(X)[:, None]
