"""High-level Gaussian policy trained with PPO, GAE and colored exploration noise."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import neural
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .sim2d import ACTION_HIGH, ACTION_LOW

LOG_2PI = math.log(2.0 * math.pi)


class PPOFault(FloatingPointError):
    """A PPO loss or gradient became non-finite."""


@dataclass
class PPOConfig:
    hidden_sizes: tuple = (128, 64)
    init_std: float = 1.0
    learning_rate: float = 1e-3
    lr_bounds: tuple = (1e-6, 1e-2)
    desired_kl: float = 0.01
    clip_param: float = 0.2
    entropy_coef: float = 0.005
    value_loss_coef: float = 1.0
    max_grad_norm: float = 1.0
    num_mini_batches: int = 4
    num_learning_epochs: int = 5
    gamma: float = 0.99
    lam: float = 0.95
    noise_beta: float = 0.5

    @classmethod
    def from_section(cls, section) -> "PPOConfig":
        kw = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in dict(section).items():
            if key not in known:
                raise ValueError(f"unknown [ppo] key {key!r}")
            default = getattr(cls(), key)
            if isinstance(default, tuple):
                kw[key] = tuple(type(default[0])(v) for v in str(raw).replace(",", " ").split())
            else:
                kw[key] = type(default)(raw)
        return cls(**kw)


# --- colored noise -----------------------------------------------------------


def colored_noise(beta, horizon, dims, rng):
    """``(horizon, dims)`` Gaussian noise with power spectral density ~ 1/f**beta.

    Spectral synthesis: white complex amplitudes shaped by ``f**(-beta/2)``,
    inverse real FFT, then division by the theoretical standard deviation so
    each dimension has unit marginal variance.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if horizon == 1:
        return rng.standard_normal((1, dims))
    f = np.fft.rfftfreq(horizon)
    f[0] = 1.0 / horizon
    scale = f ** (-beta / 2.0)
    w = scale[1:].copy()
    if horizon % 2 == 0:
        w[-1] *= (1 + (horizon % 2)) / 2.0
    sigma = 2.0 * np.sqrt(np.sum(w ** 2)) / horizon
    sr = rng.standard_normal((dims, f.size)) * scale
    si = rng.standard_normal((dims, f.size)) * scale
    if horizon % 2 == 0:
        si[:, -1] = 0.0
        sr[:, -1] *= np.sqrt(2.0)
    si[:, 0] = 0.0
    sr[:, 0] *= np.sqrt(2.0)
    y = np.fft.irfft(sr + 1j * si, n=horizon, axis=-1) / sigma
    return y.T


def psd_slope(samples):
    """Least-squares slope of log mean periodogram vs log frequency (DC and Nyquist dropped)."""
    x = np.atleast_2d(samples)
    n = x.shape[-1]
    p = np.mean(np.abs(np.fft.rfft(x, axis=-1)) ** 2, axis=0)
    f = np.fft.rfftfreq(n)
    keep = slice(1, -1 if n % 2 == 0 else None)
    slope, _ = np.polyfit(np.log(f[keep]), np.log(p[keep]), 1)
    return float(slope)


class ColoredNoiseState:
    """Per-environment precomputed noise sequences, one per episode."""

    def __init__(self, n_envs, horizon, dims=3, beta=0.5, rng=None):
        self.n_envs = n_envs
        self.horizon = horizon
        self.dims = dims
        self.beta = beta
        self.rng = rng if rng is not None else np.random.default_rng()
        self.seq = np.zeros((n_envs, horizon, dims))
        self.cursor = np.zeros(n_envs, dtype=np.int64)
        self.reset(np.ones(n_envs, dtype=bool))

    def reset(self, mask):
        for i in np.flatnonzero(mask):
            self.seq[i] = colored_noise(self.beta, self.horizon, self.dims, self.rng)
            self.cursor[i] = 0

    def next(self):
        out = self.seq[np.arange(self.n_envs), np.minimum(self.cursor, self.horizon - 1)]
        self.cursor += 1
        return out


# --- policy ---------------------------------------------------------------


@dataclass
class PolicyState:
    mean_net: neural.Params
    log_std: np.ndarray
    value_net: neural.Params
    obs_scale: np.ndarray
    lr: float
    opt_mean: neural.AdamState = None
    opt_std: neural.AdamState = None
    opt_value: neural.AdamState = None

    @classmethod
    def create(cls, obs_dim, cfg: PPOConfig, seed, obs_scale=None) -> "PolicyState":
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        s_mean, s_value = ss.spawn(2)
        mean_net = neural.init_params(neural.MlpSpec((obs_dim, *cfg.hidden_sizes, 3), output_gain=0.01), s_mean)
        value_net = neural.init_params(neural.MlpSpec((obs_dim, *cfg.hidden_sizes, 1), output_gain=1.0), s_value)
        scale = np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale, dtype=np.float64)
        st = cls(mean_net, np.full(3, math.log(cfg.init_std)), value_net, scale, cfg.learning_rate)
        st.opt_mean = neural.AdamState.zeros(mean_net.spec.n_params, lr=st.lr)
        st.opt_std = neural.AdamState.zeros(3, lr=st.lr)
        st.opt_value = neural.AdamState.zeros(value_net.spec.n_params, lr=st.lr)
        return st

    @property
    def std(self):
        return np.exp(self.log_std)

    def mean(self, obs):
        return neural.forward(self.mean_net, np.asarray(obs) / self.obs_scale)

    def value(self, obs):
        return neural.forward(self.value_net, np.asarray(obs) / self.obs_scale)[..., 0]


def gaussian_log_prob(x, mean, log_std):
    z = (x - mean) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def act(policy: PolicyState, obs, noise):
    """Sample ``mean + std * noise``; the log-prob is of the unclipped draw."""
    mean = policy.mean(obs)
    raw = mean + policy.std * noise
    logp = gaussian_log_prob(raw, mean, policy.log_std)
    value = policy.value(obs)
    return np.clip(raw, ACTION_LOW, ACTION_HIGH), raw, logp, value, mean


def act_deterministic(policy: PolicyState, obs):
    return np.clip(policy.mean(obs), ACTION_LOW, ACTION_HIGH)


# --- advantage estimation ---------------------------------------------------


@dataclass
class RolloutBatch:
    """Rollout storage, time-major ``(T, E, ...)``."""

    obs: np.ndarray
    raw_actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    means: np.ndarray
    last_values: np.ndarray

    @property
    def shape(self):
        return self.rewards.shape


def gae(rewards, values, dones, last_values, gamma=0.99, lam=0.95):
    """Generalized advantage estimation over ``(T, E)`` arrays.

    ``dones[t]`` marks that the episode ended after step ``t``: nothing from
    ``t + 1`` onward leaks into step ``t``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        next_v = last_values if t == T - 1 else values[t + 1]
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv, adv + values


# --- update -----------------------------------------------------------------


def gaussian_kl(mu_old, log_std_old, mu_new, log_std_new):
    """Per-sample KL(old || new) for diagonal Gaussians."""
    var_old = np.exp(2 * log_std_old)
    var_new = np.exp(2 * log_std_new)
    return np.sum(log_std_new - log_std_old + (var_old + (mu_old - mu_new) ** 2) / (2 * var_new) - 0.5, axis=-1)


def adapt_lr(lr, kl, desired_kl, bounds=(1e-6, 1e-2)):
    if kl > 2.0 * desired_kl:
        lr = lr / 2.0
    elif 0.0 < kl < desired_kl / 2.0:
        lr = lr * 1.5
    return float(min(max(lr, bounds[0]), bounds[1]))


def surrogate_grad(ratio, adv, clip):
    """d(-mean(min(r A, clip(r) A)))/d r per sample (before dividing by n)."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - clip, 1 + clip) * adv
    return np.where(unclipped <= clipped, -adv, 0.0)


def ppo_update(policy: PolicyState, batch: RolloutBatch, cfg: PPOConfig, rng):
    adv, returns = gae(batch.rewards, batch.values, batch.dones, batch.last_values, cfg.gamma, cfg.lam)
    n = adv.size
    obs = batch.obs.reshape(n, -1) / policy.obs_scale
    raw = batch.raw_actions.reshape(n, 3)
    old_logp = batch.log_probs.reshape(n)
    old_mu = batch.means.reshape(n, 3)
    old_log_std = policy.log_std.copy()
    adv = adv.reshape(n)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    returns = returns.reshape(n)

    stats = {"clip_frac": [], "policy_loss": [], "value_loss": [], "entropy": [], "grad_norm": []}
    mb_size = n // cfg.num_mini_batches
    for _ in range(cfg.num_learning_epochs):
        perm = rng.permutation(n)
        for b in range(cfg.num_mini_batches):
            idx = perm[b * mb_size:(b + 1) * mb_size]
            o = obs[idx]
            mu, cache_m = neural.forward(policy.mean_net, o, return_cache=True)
            v, cache_v = neural.forward(policy.value_net, o, return_cache=True)
            v = v[:, 0]
            log_std = policy.log_std

            logp = gaussian_log_prob(raw[idx], mu, log_std)
            ratio = np.exp(logp - old_logp[idx])
            a = adv[idx]
            surr = np.minimum(ratio * a, np.clip(ratio, 1 - cfg.clip_param, 1 + cfg.clip_param) * a)
            policy_loss = -float(np.mean(surr))
            value_loss = float(np.mean((returns[idx] - v) ** 2))
            entropy = float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))
            loss = policy_loss + cfg.value_loss_coef * value_loss - cfg.entropy_coef * entropy
            if not np.isfinite(loss):
                raise PPOFault(f"non-finite PPO loss (policy {policy_loss}, value {value_loss})")

            m = idx.size
            g_logp = surrogate_grad(ratio, a, cfg.clip_param) * ratio / m
            var = np.exp(2 * log_std)
            diff = raw[idx] - mu
            g_mu = g_logp[:, None] * diff / var
            g_log_std = np.sum(g_logp[:, None] * (diff * diff / var - 1.0), axis=0) - cfg.entropy_coef
            g_v = cfg.value_loss_coef * (-2.0 / m) * (returns[idx] - v)
            g_mean_net = neural.backward(policy.mean_net, cache_m, g_mu)
            g_value_net = neural.backward(policy.value_net, cache_v, g_v[:, None])
            (g_mean_net, g_log_std, g_value_net), gnorm = neural.clip_grad_norm(
                [g_mean_net, g_log_std, g_value_net], cfg.max_grad_norm
            )
            policy.opt_mean.lr = policy.opt_std.lr = policy.opt_value.lr = policy.lr
            policy.opt_mean, flat = neural.adam_step(policy.opt_mean, policy.mean_net.flat, g_mean_net)
            policy.mean_net = neural.Params(policy.mean_net.spec, flat)
            policy.opt_std, policy.log_std = neural.adam_step(policy.opt_std, policy.log_std, g_log_std)
            policy.opt_value, flat = neural.adam_step(policy.opt_value, policy.value_net.flat, g_value_net)
            policy.value_net = neural.Params(policy.value_net.spec, flat)

            stats["clip_frac"].append(float(np.mean(np.abs(ratio - 1.0) > cfg.clip_param)))
            stats["policy_loss"].append(policy_loss)
            stats["value_loss"].append(value_loss)
            stats["entropy"].append(entropy)
            stats["grad_norm"].append(gnorm)
    out = {k: float(np.mean(v)) for k, v in stats.items()}
    # KL of the whole update, measured once on the full batch; sets the next update's lr
    new_mu = neural.forward(policy.mean_net, obs)
    out["kl"] = float(np.mean(gaussian_kl(old_mu, old_log_std, new_mu, policy.log_std)))
    if not np.isfinite(out["kl"]):
        raise PPOFault("non-finite policy KL after update")
    if cfg.desired_kl > 0:
        policy.lr = adapt_lr(policy.lr, out["kl"], cfg.desired_kl, cfg.lr_bounds)
    out["lr"] = policy.lr
    return policy, out


POLICY_KIND = "policy"


def save_policy(policy: PolicyState, path, meta=None):
    meta = dict(meta or {})
    meta["mean_layers"] = list(policy.mean_net.spec.layer_sizes)
    meta["value_layers"] = list(policy.value_net.spec.layer_sizes)
    meta["lr"] = policy.lr
    arrays = {
        "mean_net": policy.mean_net.flat,
        "log_std": policy.log_std,
        "value_net": policy.value_net.flat,
        "obs_scale": policy.obs_scale,
    }
    return save_arrays(path, POLICY_KIND, arrays, meta)


def load_policy(path):
    arrays, meta = load_arrays(path, kind=POLICY_KIND)
    try:
        mean_spec = neural.MlpSpec(tuple(meta["mean_layers"]), output_gain=0.01)
        value_spec = neural.MlpSpec(tuple(meta["value_layers"]))
        st = PolicyState(
            neural.Params(mean_spec, arrays["mean_net"]),
            arrays["log_std"].copy(),
            neural.Params(value_spec, arrays["value_net"]),
            arrays["obs_scale"].copy(),
            float(meta["lr"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: inconsistent policy checkpoint ({exc})") from exc
    st.opt_mean = neural.AdamState.zeros(st.mean_net.spec.n_params, lr=st.lr)
    st.opt_std = neural.AdamState.zeros(3, lr=st.lr)
    st.opt_value = neural.AdamState.zeros(st.value_net.spec.n_params, lr=st.lr)
    return st, meta
