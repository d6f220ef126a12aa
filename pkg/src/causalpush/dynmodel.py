"""Object transition model: geometric pushing prior plus a learned residual.

Rows of the design matrix ``X`` are ``[s_h (12), a_h (3)]`` with ``s_h`` laid
out as robot pose, object pose, robot velocity, object velocity (world frame)
and ``a_h`` the achieved robot velocity. Targets are next object positions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from . import neural
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .sim2d import HL_DT, HLState, World, extract_hl_state
from .validation import check_transitions

log = logging.getLogger(__name__)

N_INPUT = 15
MIN_DIRECTION_NORM = 1e-6

# fixed per-feature scales (divide); keep inputs near unit order
FEATURE_SCALE = np.array(
    [2.0, 2.0,          # object position
     1.0, 1.0,          # object minus robot position
     1.0, 1.0,          # sin 4psi_o, cos 4psi_o
     1.0, 1.0, 1.0,     # robot velocity
     1.0, 1.0, 1.0,     # object velocity
     1.0, 1.0, 1.0,     # action
     0.2, 0.2]          # kinematic-prior displacement
)
N_FEATURES = FEATURE_SCALE.size
OUTPUT_SCALE = 0.1


def kinematic_prior(s_h, a_h, dt=HL_DT, eps_p=0.7):
    """Next object position when the robot shoves it along the robot-to-object ray.

    Accepts an :class:`HLState` or its ``(..., 12)`` array form; ``a_h`` is
    ``(..., 3)``. Returns ``(..., 2)``.
    """
    arr = s_h.to_array() if isinstance(s_h, HLState) else np.asarray(s_h, dtype=np.float64)
    a = np.asarray(a_h, dtype=np.float64)
    p_r = arr[..., 0:2]
    p_o = arr[..., 3:5]
    rel = p_o - p_r
    dist = np.linalg.norm(rel, axis=-1)
    safe = np.where(dist < MIN_DIRECTION_NORM, 1.0, dist)
    unit = rel / safe[..., None]
    proj = np.sum(a[..., :2] * unit, axis=-1)
    active = (dist <= eps_p) & (proj > 0) & (dist >= MIN_DIRECTION_NORM)
    return p_o + np.where(active, dt * proj, 0.0)[..., None] * unit


def residual_features(X, dt=HL_DT, eps_p=0.7):
    X = np.asarray(X, dtype=np.float64)
    p_r = X[:, 0:2]
    p_o = X[:, 3:5]
    psi_o = X[:, 5]
    prior_disp = kinematic_prior(X[:, :12], X[:, 12:15], dt, eps_p) - p_o
    feats = np.column_stack([
        p_o,
        p_o - p_r,
        np.sin(4.0 * psi_o), np.cos(4.0 * psi_o),
        X[:, 6:9],
        X[:, 9:12],
        X[:, 12:15],
        prior_disp,
    ])
    return feats / FEATURE_SCALE


class ResidualDynamics(BaseEstimator, RegressorMixin):
    """Gaussian object-transition model with mean ``prior + residual`` and fixed ``sigma``.

    ``use_prior=False`` swaps the geometric prior for the no-motion baseline
    ``p_o`` (a fully learned model); ``use_residual=False`` freezes the
    residual at zero (prior only).
    """

    def __init__(self, hidden_sizes=(128, 64), use_prior=True, use_residual=True, sigma=1.0,
                 eps_p=0.7, dt=HL_DT, lr=1e-4, batch_size=4096, epochs=8, random_state=0):
        self.hidden_sizes = hidden_sizes
        self.use_prior = use_prior
        self.use_residual = use_residual
        self.sigma = sigma
        self.eps_p = eps_p
        self.dt = dt
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    # -- setup --------------------------------------------------------------
    def _check_hyper(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.eps_p <= 0:
            raise ValueError("eps_p must be positive")

    def initialize(self):
        """Zero-output residual network and fresh optimizer state."""
        self._check_hyper()
        spec = neural.MlpSpec((N_FEATURES, *self.hidden_sizes, 2), output_gain=0.0)
        self.params_ = neural.init_params(spec, self.random_state)
        self.opt_ = neural.AdamState.zeros(spec.n_params, lr=self.lr)
        self._rng = np.random.default_rng(self.random_state)
        self.n_updates_ = 0
        return self

    def _ensure_init(self):
        if not hasattr(self, "params_"):
            self.initialize()

    # -- prediction ---------------------------------------------------------
    def base(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.use_prior:
            return kinematic_prior(X[:, :12], X[:, 12:15], self.dt, self.eps_p)
        return X[:, 3:5].copy()

    def residual(self, X, dtype=np.float64):
        X = np.asarray(X, dtype=np.float64)
        if not self.use_residual:
            return np.zeros((X.shape[0], 2))
        self._ensure_init()
        feats = residual_features(X, self.dt, self.eps_p)
        out = neural.forward(self.params_, feats, dtype=dtype)
        return OUTPUT_SCALE * out.astype(np.float64)

    def predict(self, X):
        X = check_transitions(X)
        return self.base(X) + self.residual(X)

    def predict_mean(self, s_h, a_h):
        arr = s_h.to_array() if isinstance(s_h, HLState) else np.asarray(s_h, dtype=np.float64)
        a = np.asarray(a_h, dtype=np.float64)
        lead = np.broadcast_shapes(arr.shape[:-1], a.shape[:-1])
        X = np.concatenate(
            [np.broadcast_to(arr, lead + (12,)), np.broadcast_to(a, lead + (3,))], axis=-1
        ).reshape(-1, N_INPUT)
        return self.predict(X).reshape(lead + (2,))

    def score(self, X, y, sample_weight=None):
        """Negative mean squared next-position error (higher is better)."""
        return -mse(self, X, y)

    # -- training -----------------------------------------------------------
    def _loss_and_grad(self, X, y):
        feats = residual_features(X, self.dt, self.eps_p)
        out, cache = neural.forward(self.params_, feats, return_cache=True)
        pred = self.base(X) + OUTPUT_SCALE * out
        err = pred - y
        n = X.shape[0]
        loss = float(np.sum(err * err) / n)
        upstream = (2.0 / n) * err * OUTPUT_SCALE
        return loss, neural.backward(self.params_, cache, upstream)

    def sgd_step(self, X, y):
        """One Adam step on a minibatch; returns the minibatch loss before the step."""
        self._ensure_init()
        loss, grad = self._loss_and_grad(X, y)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite residual loss")
        self.opt_.lr = self.lr
        self.opt_, flat = neural.adam_step(self.opt_, self.params_.flat, grad)
        self.params_ = neural.Params(self.params_.spec, flat)
        self.n_updates_ += 1
        return loss

    def partial_fit(self, X, y):
        """One shuffled pass over ``(X, y)`` in minibatches; returns the mean loss."""
        X, y = check_transitions(X, y)
        self._ensure_init()
        if not self.use_residual:
            return mse(self, X, y)
        order = self._rng.permutation(X.shape[0])
        losses = []
        for start in range(0, X.shape[0], self.batch_size):
            idx = order[start:start + self.batch_size]
            losses.append(self.sgd_step(X[idx], y[idx]))
        return float(np.mean(losses))

    def fit(self, X, y):
        self.initialize()
        self.loss_curve_ = [self.partial_fit(X, y) for _ in range(self.epochs)]
        return self


def mse(model, X, y):
    X, y = check_transitions(X, y)
    err = model.predict(X) - y
    return float(np.mean(np.sum(err * err, axis=1)))


def prior_only_mse(X, y, dt=HL_DT, eps_p=0.7):
    X, y = check_transitions(X, y)
    err = kinematic_prior(X[:, :12], X[:, 12:15], dt, eps_p) - y
    return float(np.mean(np.sum(err * err, axis=1)))


class DynBuffer:
    """FIFO ring buffer of ``(X row, next object position)`` pairs."""

    def __init__(self, capacity=1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.X = np.zeros((self.capacity, N_INPUT))
        self.y = np.zeros((self.capacity, 2))
        self.size = 0
        self.cursor = 0

    def __len__(self):
        return self.size

    def push(self, X, y):
        X, y = check_transitions(X, y)
        n = X.shape[0]
        if n > self.capacity:
            X, y, n = X[-self.capacity:], y[-self.capacity:], self.capacity
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.X[idx] = X
        self.y[idx] = y
        self.cursor = (self.cursor + n) % self.capacity
        self.size = min(self.capacity, self.size + n)

    def oldest_first(self):
        """Stored data in insertion order."""
        if self.size < self.capacity:
            return self.X[:self.size].copy(), self.y[:self.size].copy()
        idx = (self.cursor + np.arange(self.capacity)) % self.capacity
        return self.X[idx], self.y[idx]

    def sample(self, batch_size, rng):
        idx = rng.choice(self.size, size=min(batch_size, self.size), replace=False)
        return self.X[idx], self.y[idx]


def transition_rows(world_before: World, world_after: World):
    """Design rows and labels for one high-level step; the action is the achieved velocity."""
    s = extract_hl_state(world_before).to_array()
    X = np.concatenate([s, world_after.robot_vel], axis=1)
    return X, world_after.object_pose[:, :2].copy()


def push_transition(buffer: DynBuffer, world_before: World, world_after: World):
    buffer.push(*transition_rows(world_before, world_after))


@dataclass
class TrainStatus:
    loss_trace: list
    trained: bool


def train_residual(model: ResidualDynamics, buffer: DynBuffer, epochs=8, batch_size=4096, lr=1e-4, rng=None):
    """``epochs`` Adam steps, each on a fresh uniformly drawn batch from ``buffer``."""
    model._ensure_init()
    if not model.use_residual:
        return TrainStatus([], False)
    if len(buffer) < batch_size:
        if len(buffer) == 0:
            log.warning("dynamics buffer empty; residual update skipped")
        return TrainStatus([], False)
    rng = model._rng if rng is None else rng
    model.lr = lr
    trace = []
    for _ in range(epochs):
        Xb, yb = buffer.sample(batch_size, rng)
        trace.append(model.sgd_step(Xb, yb))
    return TrainStatus(trace, True)


CKPT_KIND = "residual"


def save_residual(model: ResidualDynamics, path):
    model._ensure_init()
    meta = {
        "hidden_sizes": list(model.hidden_sizes),
        "layer_sizes": list(model.params_.spec.layer_sizes),
        "feature_scale": FEATURE_SCALE.tolist(),
        "output_scale": OUTPUT_SCALE,
        "sigma": model.sigma,
        "eps_p": model.eps_p,
        "dt": model.dt,
        "use_prior": bool(model.use_prior),
        "use_residual": bool(model.use_residual),
    }
    return save_arrays(path, CKPT_KIND, {"residual": model.params_.flat}, meta)


def load_residual(path, into: ResidualDynamics = None) -> ResidualDynamics:
    """Read a residual checkpoint; with ``into``, its architecture must match exactly."""
    arrays, meta = load_arrays(path, kind=CKPT_KIND)
    try:
        sizes = tuple(int(s) for s in meta["layer_sizes"])
        flat = arrays["residual"]
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing field {exc}") from exc
    if sizes[0] != N_FEATURES or sizes[-1] != 2:
        raise CheckpointError(f"{path}: layer sizes {sizes} do not fit this feature map")
    if not np.allclose(meta.get("feature_scale", []), FEATURE_SCALE) or meta.get("output_scale") != OUTPUT_SCALE:
        raise CheckpointError(f"{path}: feature scaling differs from this build")
    spec = neural.MlpSpec(sizes, output_gain=0.0)
    if flat.shape != (spec.n_params,):
        raise CheckpointError(f"{path}: {flat.size} parameters, layers need {spec.n_params}")
    if into is not None:
        into._ensure_init()
        if tuple(into.params_.spec.layer_sizes) != sizes:
            raise CheckpointError(
                f"{path}: layers {sizes} do not match model layers {into.params_.spec.layer_sizes}"
            )
        model = into
    else:
        model = ResidualDynamics(
            hidden_sizes=sizes[1:-1], sigma=meta["sigma"], eps_p=meta["eps_p"], dt=meta["dt"],
            use_prior=meta.get("use_prior", True), use_residual=meta.get("use_residual", True),
        )
        model.initialize()
    model.params_ = neural.Params(spec, flat.copy())
    return model
