"""Hand-written pushing controller and scripted transition datasets."""
from __future__ import annotations

import numpy as np

from . import sim2d
from .dynmodel import transition_rows
from .policy import colored_noise

APPROACH_GAP = 0.12


def push_command(world: sim2d.World, goal=None, gain=2.0):
    """Velocity command that walks behind the object and pushes it toward ``goal``.

    ``goal`` defaults to each world's target. Commands are in the world frame.
    """
    goal = world.target if goal is None else np.broadcast_to(goal, (world.n, 2))
    p_r = world.robot_pose[:, :2]
    p_o = world.object_pose[:, :2]
    to_goal = goal - p_o
    dist = np.linalg.norm(to_goal, axis=1, keepdims=True)
    u = to_goal / np.maximum(dist, 1e-9)
    perp = np.column_stack([-u[:, 1], u[:, 0]])
    contact_gap = world.robot_radius + world.object_half_extent * np.sqrt(2.0)
    behind = p_o - u * (contact_gap + APPROACH_GAP)

    rel = p_r - p_o
    along = np.sum(rel * u, axis=1)
    lateral = np.sum(rel * perp, axis=1)
    aligned = (along < -0.3) & (np.abs(lateral) < 0.15)

    # approach: go to the point behind the object, swinging wide when the robot is in front
    waypoint = behind.copy()
    side = np.where(lateral >= 0, 1.0, -1.0)[:, None]
    in_front = along > -(contact_gap + 0.05)
    waypoint[in_front] = (p_o + perp * side * (contact_gap + 0.3))[in_front]
    approach = gain * (waypoint - p_r)

    speed = np.clip(1.5 * dist[:, 0], 0.0, 1.0)[:, None]
    push = u * speed - 2.0 * lateral[:, None] * perp
    cmd = np.where(aligned[:, None], push, approach)
    cmd = np.where(dist < 0.04, 0.0, cmd)
    out = np.zeros((world.n, 3))
    out[:, :2] = cmd
    return sim2d.clip_action(out)


def scripted_rollout(scene: sim2d.SceneConfig, n_envs, n_steps, seed, noise_mix=0.5, beta=0.5):
    """Transitions from a blend of goal-directed pushing and correlated random commands.

    Each environment gets its own push goal and its own mixing weight, so the
    data covers free motion, pushing, and (in walled scenes) wall contact.
    Returns ``(X, y)`` in the transition layout of :mod:`causalpush.dynmodel`.
    """
    rng = np.random.default_rng(seed)
    world = sim2d.load_scene(scene, rng, n=n_envs)
    goals = world.object_pose[:, :2] + rng.uniform([-0.5, -2.0], [3.5, 2.0], size=(n_envs, 2))
    weight = rng.uniform(0.0, 2.0 * noise_mix, size=(n_envs, 1))
    noise = np.stack([colored_noise(beta, n_steps, 3, rng) for _ in range(n_envs)], axis=0)
    Xs, ys = [], []
    for t in range(n_steps):
        a = (1.0 - np.minimum(weight, 1.0)) * push_command(world, goals) + weight * noise[:, t]
        nxt = sim2d.hl_step(world, sim2d.clip_action(a))
        X, y = transition_rows(world, nxt)
        Xs.append(X)
        ys.append(y)
        world = nxt
    return np.concatenate(Xs), np.concatenate(ys)


def scripted_dataset(scene, n_transitions, seed, horizon=100):
    n_envs = int(np.ceil(n_transitions / horizon))
    X, y = scripted_rollout(scene, n_envs, horizon, seed)
    return X[:n_transitions], y[:n_transitions]
