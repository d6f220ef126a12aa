"""Planar quasi-static pushing: a velocity-commanded disc robot, one oriented box, static walls.

Every world array carries a leading batch axis, so one ``World`` holds ``n``
independent environments that step together. Contacts are resolved by
position projection (robot-object, object-wall, robot-wall) and velocities
are recovered from the resulting displacements.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ._kernels import step_batch

LL_DT = 0.02
HL_DT = 0.2
LL_PER_HL = 10

ACTION_LOW = np.array([-1.0, -1.0, -1.0])
ACTION_HIGH = np.array([1.0, 1.0, 1.0])

# plant
TRACKING_TAU = 0.25
MAX_ACCEL = np.array([3.0, 3.0, 6.0])
SOLVER_ITERATIONS = 4

# contact and ground interaction
ROBOT_MASS = 15.0
LINEAR_DAMPING = 10.0      # 1/s, multiplied by the friction coefficient
QUADRATIC_DAMPING = 4.0    # 1/m, multiplied by the friction coefficient
ANGULAR_DAMPING = 20.0     # 1/s
ROTATION_COMPLIANCE = 0.5
CONTACT_TOL = 1e-6

MAX_INIT_ATTEMPTS = 100


class SceneSamplingError(RuntimeError):
    """No collision-free initial configuration found within the attempt budget."""


class NumericFault(FloatingPointError):
    """The simulator state became non-finite."""


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)


def clip_action(a):
    return np.clip(np.asarray(a, dtype=np.float64), ACTION_LOW, ACTION_HIGH)


def _rot(psi):
    c, s = np.cos(psi), np.sin(psi)
    return c, s


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    psi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "psi", float(wrap_angle(self.psi)))


@dataclass(frozen=True)
class Vel2:
    vx: float = 0.0
    vy: float = 0.0
    wz: float = 0.0


@dataclass(frozen=True)
class Wall:
    pose: Pose2
    half_extents: Tuple[float, float]

    def as_row(self):
        return [self.pose.x, self.pose.y, self.pose.psi, self.half_extents[0], self.half_extents[1]]


TASKS = ("single_object", "single_wall", "multi_wall", "single_wall_random_target", "custom")

_SINGLE_WALL = (Wall(Pose2(2.0, 0.0, 0.0), (0.05, 0.5)),)
_MULTI_WALL = (
    Wall(Pose2(2.0, 0.0, 0.0), (0.05, 0.625)),
    Wall(Pose2(3.25, 1.25, 0.0), (0.05, 0.625)),
    Wall(Pose2(3.25, -1.25, 0.0), (0.05, 0.625)),
)


@dataclass(frozen=True)
class SceneConfig:
    task: str = "single_object"
    robot_xy: Tuple[float, float] = (0.0, 0.0)
    robot_yaw: Optional[float] = None  # None: yaw ~ U(-pi, pi]
    object_pose: Pose2 = Pose2(1.0, 0.0, 0.0)
    target_x: Tuple[float, float] = (3.0, 3.0)
    target_y: Tuple[float, float] = (0.0, 0.0)
    walls: Tuple[Wall, ...] = ()
    object_half_extent: float = 0.25
    robot_radius: float = 0.35
    object_mass: float = 5.0
    object_friction: float = 1.0
    episode_length_s: float = 20.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {TASKS}")
        for lo, hi in (self.target_x, self.target_y):
            if hi < lo:
                raise ValueError("target range upper bound below lower bound")
        if self.object_half_extent <= 0 or self.robot_radius <= 0:
            raise ValueError("body dimensions must be positive")
        if self.object_mass <= 0 or self.object_friction < 0:
            raise ValueError("object mass must be positive and friction non-negative")
        if self.episode_length_s <= 0:
            raise ValueError("episode length must be positive")

    @classmethod
    def for_task(cls, task, **overrides) -> "SceneConfig":
        presets = {
            "single_object": dict(target_x=(3.0, 3.0)),
            "single_wall": dict(target_x=(3.5, 3.5), walls=_SINGLE_WALL),
            "multi_wall": dict(target_x=(4.0, 4.0), walls=_MULTI_WALL),
            "single_wall_random_target": dict(
                target_x=(3.0, 4.0), target_y=(-1.0, 1.0), walls=_SINGLE_WALL
            ),
            "custom": {},
        }
        if task not in presets:
            raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
        kw = dict(presets[task])
        kw.update(overrides)
        return cls(task=task, **kw)

    @property
    def n_walls(self):
        return len(self.walls)

    @property
    def hl_steps_per_episode(self):
        return int(round(self.episode_length_s / HL_DT))

    def wall_array(self):
        return np.array([w.as_row() for w in self.walls], dtype=np.float64).reshape(-1, 5)


def _parse_range(text):
    parts = [float(p) for p in str(text).replace(",", " ").split()]
    if len(parts) == 1:
        return (parts[0], parts[0])
    if len(parts) != 2:
        raise ValueError(f"expected 'lo hi', got {text!r}")
    return (parts[0], parts[1])


def scene_from_section(section) -> SceneConfig:
    """Build a SceneConfig from a ``[scene]`` mapping (configparser section or dict)."""
    sec = dict(section)
    task = sec.pop("task", "single_object")
    overrides = {}
    floats = {"episode_length_s", "object_mass", "object_friction", "object_half_extent", "robot_radius"}
    for key in list(sec):
        if key in floats:
            overrides[key] = float(sec.pop(key))
        elif key in ("target_x_range", "target_x"):
            overrides["target_x"] = _parse_range(sec.pop(key))
        elif key in ("target_y_range", "target_y"):
            overrides["target_y"] = _parse_range(sec.pop(key))
    if sec:
        raise ValueError(f"unknown [scene] keys: {sorted(sec)}")
    return SceneConfig.for_task(task, **overrides)


def read_scene_config(path) -> SceneConfig:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    if "scene" not in parser:
        raise ValueError(f"{path}: missing [scene] section")
    return scene_from_section(parser["scene"])


@dataclass(frozen=True)
class World:
    """Batched simulator state. Pose/velocity arrays have shape ``(n, 3)``."""

    robot_pose: np.ndarray
    robot_vel: np.ndarray
    object_pose: np.ndarray
    object_vel: np.ndarray
    target: np.ndarray          # (n, 2)
    time: np.ndarray            # (n,)
    walls: np.ndarray           # (n_walls, 5): x, y, psi, half_x, half_y
    object_half_extent: float = 0.25
    robot_radius: float = 0.35
    object_mass: float = 5.0
    object_friction: float = 1.0

    @property
    def n(self):
        return self.robot_pose.shape[0]

    def select(self, idx) -> "World":
        return replace(
            self,
            robot_pose=self.robot_pose[idx],
            robot_vel=self.robot_vel[idx],
            object_pose=self.object_pose[idx],
            object_vel=self.object_vel[idx],
            target=self.target[idx],
            time=self.time[idx],
        )

    def where(self, mask, other: "World") -> "World":
        """Take ``other``'s entries where ``mask`` is true."""
        m = np.asarray(mask, dtype=bool)
        col = m[:, None]
        return replace(
            self,
            robot_pose=np.where(col, other.robot_pose, self.robot_pose),
            robot_vel=np.where(col, other.robot_vel, self.robot_vel),
            object_pose=np.where(col, other.object_pose, self.object_pose),
            object_vel=np.where(col, other.object_vel, self.object_vel),
            target=np.where(col, other.target, self.target),
            time=np.where(m, other.time, self.time),
        )


@dataclass(frozen=True)
class HLState:
    robot_pose: np.ndarray
    object_pose: np.ndarray
    robot_vel: np.ndarray
    object_vel: np.ndarray

    def to_array(self):
        return np.concatenate([self.robot_pose, self.object_pose, self.robot_vel, self.object_vel], axis=-1)

    @classmethod
    def from_array(cls, arr) -> "HLState":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[..., 0:3], arr[..., 3:6], arr[..., 6:9], arr[..., 9:12])


HL_STATE_DIM = 12


def extract_hl_state(world: World) -> HLState:
    return HLState(
        world.robot_pose.copy(), world.object_pose.copy(), world.robot_vel.copy(), world.object_vel.copy()
    )


# --- geometry -------------------------------------------------------------


def disc_box_contact(center, radius, box_xy, box_psi, half):
    """Penetration of discs into oriented boxes.

    ``half`` is ``(..., 2)`` or broadcastable. Returns ``(depth, normal,
    point)``: depth >= 0, unit world normal pointing from the disc into the
    box, and the contact point on the box boundary.
    """
    c, s = _rot(box_psi)
    d = center - box_xy
    qx = c * d[..., 0] + s * d[..., 1]
    qy = -s * d[..., 0] + c * d[..., 1]
    hx = half[..., 0]
    hy = half[..., 1]
    cx = np.clip(qx, -hx, hx)
    cy = np.clip(qy, -hy, hy)
    ex, ey = qx - cx, qy - cy
    dist = np.hypot(ex, ey)
    outside = dist > 1e-12
    safe = np.where(outside, dist, 1.0)
    # box-frame normal pointing from the box toward the disc centre
    nx_out = ex / safe
    ny_out = ey / safe
    depth_out = radius - dist
    # centre inside the box: leave through the nearest face
    gaps = np.stack([hx - qx, hx + qx, hy - qy, hy + qy], axis=-1)
    face = np.argmin(gaps, axis=-1)
    nx_in = np.select([face == 0, face == 1], [1.0, -1.0], 0.0)
    ny_in = np.select([face == 2, face == 3], [1.0, -1.0], 0.0)
    depth_in = radius + np.min(gaps, axis=-1)
    px_in = np.where(face == 0, hx, np.where(face == 1, -hx, qx))
    py_in = np.where(face == 2, hy, np.where(face == 3, -hy, qy))
    nx = np.where(outside, nx_out, nx_in)
    ny = np.where(outside, ny_out, ny_in)
    depth = np.maximum(np.where(outside, depth_out, depth_in), 0.0)
    px = np.where(outside, cx, px_in)
    py = np.where(outside, cy, py_in)
    # into-box normal and contact point in world frame
    normal = np.stack([-(c * nx - s * ny), -(s * nx + c * ny)], axis=-1)
    point = box_xy + np.stack([c * px - s * py, s * px + c * py], axis=-1)
    return depth, normal, point


def box_box_penetration(a_xy, a_psi, a_half, b_xy, b_psi, b_half):
    """Separating-axis overlap of oriented rectangles A and B.

    Returns ``(depth, normal)`` with the unit normal pointing from B to A;
    depth is 0 where the boxes are separated.
    """
    ca, sa = _rot(a_psi)
    cb, sb = _rot(b_psi)
    a_axes = [np.stack([ca, sa], -1), np.stack([-sa, ca], -1)]
    b_axes = [np.stack([cb, sb], -1), np.stack([-sb, cb], -1)]
    a_axes = [np.broadcast_to(ax, a_xy.shape) for ax in a_axes]
    b_axes = [np.broadcast_to(ax, a_xy.shape) for ax in b_axes]
    d = a_xy - b_xy
    overlaps = []
    signs = []
    axes = a_axes + b_axes
    for u in axes:
        ra = a_half[..., 0] * np.abs(np.sum(a_axes[0] * u, -1)) + a_half[..., 1] * np.abs(np.sum(a_axes[1] * u, -1))
        rb = b_half[..., 0] * np.abs(np.sum(b_axes[0] * u, -1)) + b_half[..., 1] * np.abs(np.sum(b_axes[1] * u, -1))
        proj = np.sum(d * u, -1)
        overlaps.append(ra + rb - np.abs(proj))
        signs.append(np.where(proj >= 0, 1.0, -1.0))
    ov = np.stack(overlaps, -1)
    k = np.argmin(ov, axis=-1)
    depth = np.maximum(np.take_along_axis(ov, k[..., None], -1)[..., 0], 0.0)
    ax = np.stack(axes, -2)  # (..., 4, 2)
    sg = np.stack(signs, -1)
    normal = np.take_along_axis(ax, k[..., None, None].repeat(2, -1), -2)[..., 0, :]
    normal = normal * np.take_along_axis(sg, k[..., None], -1)
    return depth, normal


# --- scene construction ---------------------------------------------------


def _collision_free(robot_xy, object_pose, config: SceneConfig, target_xy):
    h = config.object_half_extent
    half = np.full(robot_xy.shape, h)
    depth, _, _ = disc_box_contact(robot_xy, config.robot_radius, object_pose[:, :2], object_pose[:, 2], half)
    ok = depth <= 0.0
    for w in config.walls:
        wxy = np.array([w.pose.x, w.pose.y])
        whalf = np.array(w.half_extents)
        dr, _, _ = disc_box_contact(robot_xy, config.robot_radius, wxy, w.pose.psi, whalf)
        do, _ = box_box_penetration(object_pose[:, :2], object_pose[:, 2], half, wxy, w.pose.psi, whalf)
        dt_, _, _ = disc_box_contact(target_xy, 0.0, wxy, w.pose.psi, whalf)
        ok &= (dr <= 0.0) & (do <= 0.0)
        # a target point strictly inside a wall is unreachable
        inside = np.all(
            np.abs(_to_frame(target_xy, wxy, w.pose.psi)) < whalf, axis=-1
        )
        ok &= ~inside
    return ok


def _to_frame(xy, origin, psi):
    c, s = _rot(psi)
    d = xy - origin
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], -1)


def _sample(config: SceneConfig, rng, n):
    robot_xy = np.tile(np.asarray(config.robot_xy, dtype=np.float64), (n, 1))
    if config.robot_yaw is None:
        yaw = np.pi - rng.uniform(0.0, 2.0 * np.pi, size=n)  # (-pi, pi]
    else:
        yaw = np.full(n, float(wrap_angle(config.robot_yaw)))
    op = config.object_pose
    obj = np.tile([op.x, op.y, op.psi], (n, 1)).astype(np.float64)
    tx = rng.uniform(*config.target_x, size=n) if config.target_x[1] > config.target_x[0] else np.full(n, config.target_x[0])
    ty = rng.uniform(*config.target_y, size=n) if config.target_y[1] > config.target_y[0] else np.full(n, config.target_y[0])
    return robot_xy, yaw, obj, np.stack([tx, ty], -1)


def load_scene(config: SceneConfig, seed=None, n=1) -> World:
    """Instantiate ``n`` worlds; ``seed`` may be an int or a numpy Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    robot_xy, yaw, obj, target = _sample(config, rng, n)
    ok = _collision_free(robot_xy, obj, config, target)
    attempts = 1
    while not ok.all():
        if attempts >= MAX_INIT_ATTEMPTS:
            raise SceneSamplingError(
                f"{int((~ok).sum())} of {n} worlds still in collision after {attempts} attempts"
            )
        redo = ~ok
        r2, y2, o2, t2 = _sample(config, rng, int(redo.sum()))
        robot_xy[redo], yaw[redo], obj[redo], target[redo] = r2, y2, o2, t2
        ok = _collision_free(robot_xy, obj, config, target)
        attempts += 1
    return World(
        robot_pose=np.column_stack([robot_xy, yaw]),
        robot_vel=np.zeros((n, 3)),
        object_pose=obj,
        object_vel=np.zeros((n, 3)),
        target=target,
        time=np.zeros(n),
        walls=config.wall_array(),
        object_half_extent=config.object_half_extent,
        robot_radius=config.robot_radius,
        object_mass=config.object_mass,
        object_friction=config.object_friction,
    )


# --- dynamics -------------------------------------------------------------


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericFault("non-finite simulator state")


def step_reference(world: World, action, dt=LL_DT) -> World:
    """Pure-numpy low-level step; the compiled path in :func:`step` must agree with it."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = clip_action(action)
    a = np.broadcast_to(a, world.robot_vel.shape)
    _check_finite(a, world.robot_pose, world.robot_vel, world.object_pose, world.object_vel)

    # first-order velocity tracking with an acceleration clamp
    dv_max = MAX_ACCEL * dt
    dv = np.clip((a - world.robot_vel) * (dt / TRACKING_TAU), -dv_max, dv_max)
    v_cmd = world.robot_vel + dv
    pr0 = world.robot_pose[:, :2]
    pr = pr0 + v_cmd[:, :2] * dt
    psi_r = wrap_angle(world.robot_pose[:, 2] + v_cmd[:, 2] * dt)

    # object coasting under ground friction
    mu = world.object_friction
    po0 = world.object_pose[:, :2]
    psi_o0 = world.object_pose[:, 2]
    vo = world.object_vel[:, :2]
    speed = np.hypot(vo[:, 0], vo[:, 1])
    fac = np.clip(1.0 - mu * (LINEAR_DAMPING + QUADRATIC_DAMPING * speed) * dt, 0.0, 1.0)
    ang_fac = max(0.0, 1.0 - ANGULAR_DAMPING * dt)
    po = po0 + vo * fac[:, None] * dt
    psi_o = psi_o0 + world.object_vel[:, 2] * ang_fac * dt

    h = world.object_half_extent
    half = np.full((world.n, 2), h)
    gyration2 = 2.0 * h * h / 3.0
    share_obj = ROBOT_MASS / (ROBOT_MASS + world.object_mass)
    walls = world.walls
    for it in range(SOLVER_ITERATIONS):
        final = it == SOLVER_ITERATIONS - 1
        depth, normal, point = disc_box_contact(pr, world.robot_radius, po, psi_o, half)
        if final:
            pr = pr - depth[:, None] * normal
        else:
            push = (share_obj * depth)[:, None] * normal
            lever = point - po
            psi_o = psi_o + ROTATION_COMPLIANCE * (lever[:, 0] * push[:, 1] - lever[:, 1] * push[:, 0]) / gyration2
            po = po + push
            pr = pr - ((1.0 - share_obj) * depth)[:, None] * normal
        for w in walls:
            wxy, wpsi, whalf = w[:2], w[2], w[3:5]
            if not final:
                d_o, n_o = box_box_penetration(po, psi_o, half, wxy, wpsi, whalf)
                po = po + d_o[:, None] * n_o
            d_r, n_r, _ = disc_box_contact(pr, world.robot_radius, wxy, wpsi, whalf)
            pr = pr - d_r[:, None] * n_r
    psi_o = wrap_angle(psi_o)
    robot_vel = np.column_stack([(pr - pr0) / dt, v_cmd[:, 2]])
    object_vel = np.column_stack([(po - po0) / dt, wrap_angle(psi_o - psi_o0) / dt])
    out = replace(
        world,
        robot_pose=np.column_stack([pr, psi_r]),
        robot_vel=robot_vel,
        object_pose=np.column_stack([po, psi_o]),
        object_vel=object_vel,
        time=world.time + dt,
    )
    _check_finite(out.robot_pose, out.robot_vel, out.object_pose, out.object_vel)
    return out


def _advance(world: World, action, dt, n_sub) -> World:
    a = np.ascontiguousarray(np.broadcast_to(clip_action(action), world.robot_vel.shape))
    _check_finite(a, world.robot_pose, world.robot_vel, world.object_pose, world.object_vel)
    rp, rv, op, ov = step_batch(
        world.robot_pose, world.robot_vel, world.object_pose, world.object_vel, a,
        np.ascontiguousarray(world.walls), float(world.object_half_extent), float(world.robot_radius),
        float(world.object_mass), float(world.object_friction), float(dt), int(n_sub),
        TRACKING_TAU, MAX_ACCEL, ROBOT_MASS, LINEAR_DAMPING, QUADRATIC_DAMPING, ANGULAR_DAMPING,
        ROTATION_COMPLIANCE, SOLVER_ITERATIONS,
    )
    _check_finite(rp, rv, op, ov)
    # the clock stays on the low-level grid despite float accumulation
    time = np.round((world.time + n_sub * dt) / LL_DT) * LL_DT
    return replace(world, robot_pose=rp, robot_vel=rv, object_pose=op, object_vel=ov, time=time)


def step(world: World, action, dt=LL_DT) -> World:
    """One low-level step of the plant and contact solver."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return _advance(world, action, dt, 1)


def hl_step(world: World, action) -> World:
    """Hold one command for a 0.2 s high-level interval (10 low-level steps)."""
    return _advance(world, action, LL_DT, LL_PER_HL)


def observe(world: World, prev_action, target=None):
    """High-level observation, world frame, shape ``(n, 17 + 3 * n_walls)``."""
    n = world.n
    tgt = world.target if target is None else np.broadcast_to(np.asarray(target, dtype=np.float64), (n, 2))
    zeros = np.zeros((n, 1))
    prev = np.broadcast_to(np.asarray(prev_action, dtype=np.float64), (n, 3))
    parts = [
        world.robot_vel[:, :2], zeros,
        zeros, zeros, world.robot_vel[:, 2:3],
        world.robot_pose,
        world.object_pose,
        tgt,
        prev,
    ]
    if len(world.walls):
        parts.append(np.broadcast_to(world.walls[:, :3].reshape(1, -1), (n, 3 * len(world.walls))))
    return np.concatenate(parts, axis=1)


def obs_dim(n_walls):
    return 17 + 3 * n_walls


def object_target_distance(world: World):
    return np.linalg.norm(world.object_pose[:, :2] - world.target, axis=1)


def is_success(world: World, eps_s=0.15):
    if eps_s <= 0:
        raise ValueError("eps_s must be positive")
    return object_target_distance(world) < eps_s


def reflect_y(world: World) -> World:
    """Mirror a world about the x-axis."""
    def flip_pose(p):
        return np.column_stack([p[:, 0], -p[:, 1], wrap_angle(-p[:, 2])])

    def flip_vel(v):
        return np.column_stack([v[:, 0], -v[:, 1], -v[:, 2]])

    walls = world.walls.copy()
    if len(walls):
        walls[:, 1] = -walls[:, 1]
        walls[:, 2] = wrap_angle(-walls[:, 2])
    return replace(
        world,
        robot_pose=flip_pose(world.robot_pose),
        robot_vel=flip_vel(world.robot_vel),
        object_pose=flip_pose(world.object_pose),
        object_vel=flip_vel(world.object_vel),
        target=world.target * np.array([1.0, -1.0]),
        walls=walls,
    )
