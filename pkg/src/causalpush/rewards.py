"""Composite training reward, the CAI weight schedule and the exploration baselines."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
from sklearn.base import BaseEstimator

from . import neural
from .validation import check_features

MODES = ("caiman", "cai_kinematic", "cai_learned", "rnd_full", "rnd_object", "heuristics")
CAI_MODES = ("caiman", "cai_kinematic", "cai_learned")
RND_MODES = ("rnd_full", "rnd_object")
TASK_REWARDS = ("sparse", "dense")

# tasks with walls get a larger task weight
_W1 = {"single_object": 15.0}
_W1_WALL = 40.0


@dataclass(frozen=True)
class RewardConfig:
    mode: str = "caiman"
    task_reward: str = "sparse"
    w1: float = 15.0
    w3: float = -5e-3
    w4: float = 10.0
    w5: float = 0.01
    w2b: float = 40.0
    alpha1: float = 12e-5
    alpha2: float = 1.5e-6
    eps: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.task_reward not in TASK_REWARDS:
            raise ValueError(f"task_reward must be one of {TASK_REWARDS}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.alpha2 <= 0:
            raise ValueError("alpha2 must be positive")

    @classmethod
    def for_task(cls, task, **overrides) -> "RewardConfig":
        w1 = _W1.get(task, _W1_WALL)
        return cls(**{"w1": w1, **overrides})

    @classmethod
    def from_section(cls, task, section) -> "RewardConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in dict(section).items():
            if key not in known:
                raise ValueError(f"unknown [reward] key {key!r}")
            kw[key] = raw if key in ("mode", "task_reward") else float(raw)
        return cls.for_task(task, **kw)

    def with_mode(self, mode) -> "RewardConfig":
        return replace(self, mode=mode)


def _dist(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.sqrt(np.sum(d * d, axis=-1))


def task_sparse(p_o, p_t, eps=0.1):
    return (_dist(p_o, p_t) < eps).astype(np.float64)


def task_dense(p_o, p_t):
    return np.exp(-_dist(p_o, p_t))


def task_reward(p_o, p_t, cfg: RewardConfig):
    if cfg.task_reward == "dense":
        return task_dense(p_o, p_t)
    return task_sparse(p_o, p_t, cfg.eps)


def action_reg(a, a_prev):
    d = np.asarray(a, dtype=np.float64) - np.asarray(a_prev, dtype=np.float64)
    return np.sum(d * d, axis=-1)


def cai_weight(r_cai, cfg: RewardConfig):
    return cfg.w2b + np.maximum(0.0, (np.asarray(r_cai, dtype=np.float64) - cfg.alpha1) / cfg.alpha2)


def heuristics_reward(p_r, p_o):
    return np.exp(-_dist(p_r, p_o))


def total_reward(mode, cfg: RewardConfig, r_task, r_reg, r_cai=0.0, r_rnd=0.0, r_heu=0.0, explore=True):
    """Task term + the single exploration term of ``mode`` + action regularizer."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    base = cfg.w1 * np.asarray(r_task, dtype=np.float64) + cfg.w3 * np.asarray(r_reg, dtype=np.float64)
    if not explore:
        return base
    if mode in CAI_MODES:
        return base + cai_weight(r_cai, cfg) * r_cai
    if mode in RND_MODES:
        return base + cfg.w4 * np.asarray(r_rnd, dtype=np.float64)
    return base + cfg.w5 * np.asarray(r_heu, dtype=np.float64)


# --- random network distillation ---------------------------------------------


def rnd_inputs(mode, obs, states, pos_scale=2.0, velocity=True):
    """Select the RND input: the whole observation, or the object's pose (and velocity)."""
    if mode == "rnd_full":
        return np.asarray(obs, dtype=np.float64)
    if mode == "rnd_object":
        s = np.asarray(states, dtype=np.float64)
        pose = s[:, 3:6] / np.array([pos_scale, pos_scale, np.pi])
        return np.concatenate([pose, s[:, 9:12]], axis=1) if velocity else pose
    raise ValueError(f"mode {mode!r} has no RND input")


class RunningStd:
    """Batched running mean and variance (parallel Welford), per feature when ``shape`` is given."""

    def __init__(self, shape=(), eps=1e-8):
        self.mean = np.zeros(shape)
        self.var = np.ones(shape)
        self.count = eps

    def update(self, x):
        x = np.asarray(x, dtype=np.float64)
        x = x.reshape(-1, *self.mean.shape)
        if x.shape[0] == 0:
            return
        b_mean, b_var, b_n = x.mean(axis=0), x.var(axis=0), x.shape[0]
        tot = self.count + b_n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * b_n + delta * delta * self.count * b_n / tot
        self.mean = self.mean + delta * b_n / tot
        self.var = m2 / tot
        self.count = tot

    @property
    def std(self):
        return np.sqrt(self.var)


class RND(BaseEstimator):
    """Frozen random target network and a trained predictor; ``score_samples`` is the error norm."""

    def __init__(self, hidden_sizes=(64, 64), embed_dim=16, lr=1e-3, batch_size=1024,
                 n_steps=4, normalize=True, clip_inputs=5.0, random_state=0):
        self.hidden_sizes = hidden_sizes
        self.embed_dim = embed_dim
        self.lr = lr
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.normalize = normalize
        self.clip_inputs = clip_inputs
        self.random_state = random_state

    def initialize(self, n_features):
        ss = np.random.SeedSequence(self.random_state)
        s_t, s_p, s_r = ss.spawn(3)
        spec = neural.MlpSpec((n_features, *self.hidden_sizes, self.embed_dim))
        self.n_features_in_ = n_features
        self.target_ = neural.init_params(spec, s_t)
        self.predictor_ = neural.init_params(spec, s_p)
        self.opt_ = neural.AdamState.zeros(spec.n_params, lr=self.lr)
        self.rng_ = np.random.default_rng(s_r)
        self.reward_std_ = RunningStd()
        self.input_stats_ = RunningStd((n_features,))
        return self

    def _ensure(self, X):
        if not hasattr(self, "target_"):
            self.initialize(np.asarray(X).shape[1])
        return check_features(X, self.n_features_in_)

    def _whiten(self, X):
        # inputs are whitened with statistics of the states seen so far and clipped,
        # which keeps the error bounded on states far outside the visited set
        if self.clip_inputs is None:
            return X
        z = (X - self.input_stats_.mean) / np.maximum(self.input_stats_.std, 1e-6)
        return np.clip(z, -self.clip_inputs, self.clip_inputs)

    def score_samples(self, X):
        X = self._whiten(self._ensure(X))
        d = neural.forward(self.predictor_, X) - neural.forward(self.target_, X)
        return np.sqrt(np.sum(d * d, axis=1))

    def reward(self, X, update_stats=True):
        """Prediction error, divided by the running std of past errors when ``normalize``."""
        r = self.score_samples(X)
        if not self.normalize:
            return r
        if update_stats:
            self.reward_std_.update(r)
        return r / max(float(self.reward_std_.std), 1e-8)

    def partial_fit(self, X, y=None):
        """``n_steps`` Adam steps on random minibatches of ``X``; returns self."""
        X = self._ensure(X)
        if self.clip_inputs is not None:
            self.input_stats_.update(X)
        X = self._whiten(X)
        target = neural.forward(self.target_, X)
        losses = []
        for _ in range(self.n_steps):
            idx = self.rng_.choice(X.shape[0], size=min(self.batch_size, X.shape[0]), replace=False)
            pred, cache = neural.forward(self.predictor_, X[idx], return_cache=True)
            d = pred - target[idx]
            losses.append(float(np.mean(np.sum(d * d, axis=1))))
            g = neural.backward(self.predictor_, cache, 2.0 * d / idx.size)
            self.opt_, flat = neural.adam_step(self.opt_, self.predictor_.flat, g)
            self.predictor_ = neural.Params(self.predictor_.spec, flat)
        self.last_loss_ = losses[-1]
        return self

    def fit(self, X, y=None):
        self.initialize(np.asarray(X).shape[1])
        return self.partial_fit(X)
