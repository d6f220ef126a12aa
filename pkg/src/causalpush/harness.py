"""Run configuration, the training loop, evaluation, suites and residual transfer."""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dynmodel, policy as ppo, rewards, sim2d
from .cai import CaiConfig, cai_score
from .checkpoint import CheckpointError
from .scripted import push_command, scripted_dataset

log = logging.getLogger(__name__)

SECTIONS = ("scene", "ppo", "reward", "dynamics", "run")
METRICS_HEADER = (
    "iteration", "mean_total_reward", "success_rate", "mean_cai",
    "dynamics_heldout_mse", "policy_kl", "lr",
)
DEFAULT_ITERATIONS = {"single_object": 1500, "single_wall": 1500, "multi_wall": 2000,
                      "single_wall_random_target": 1500}
HELDOUT_SEED = 2024
HELDOUT_SIZE = 20000
EVAL_SEED_OFFSET = 10007


class TrainingFault(RuntimeError):
    """Raised after a non-finite training signal; a diagnostic dump is written first."""


@dataclass(frozen=True)
class DynamicsConfig:
    hidden_sizes: tuple = (128, 64)
    lr: float = 1e-4
    batch_size: int = 4096
    epochs: int = 8
    buffer_capacity: int = 1_000_000
    sigma: float = 1.0
    eps_p: float = 0.7
    n_actions: int = 64
    delta_v: tuple = (0.3, 0.3, 0.4)


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    num_envs: int = 256
    iterations: int = 1500
    steps_per_iteration: int = 10
    eval_every: int = 100
    eval_episodes: int = 200
    output_dir: str = "runs/default"
    rnd_steps: int = 4
    rnd_normalize: bool = True
    rnd_object_velocity: bool = True


@dataclass(frozen=True)
class RunConfig:
    scene: sim2d.SceneConfig
    ppo: ppo.PPOConfig
    reward: rewards.RewardConfig
    dynamics: DynamicsConfig
    run: RunSettings

    @property
    def mode(self):
        return self.reward.mode

    def with_seed(self, seed) -> "RunConfig":
        return replace(self, run=replace(self.run, seed=int(seed)))

    def with_run(self, **kw) -> "RunConfig":
        return replace(self, run=replace(self.run, **kw))

    def to_dict(self):
        d = {name: asdict(getattr(self, name)) for name in SECTIONS}
        return json.loads(json.dumps(d, default=str))

    def digest(self):
        d = self.to_dict()
        d["run"].pop("output_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _coerce(default, raw):
    if isinstance(default, bool):
        return str(raw).strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        cast = type(default[0]) if default else float
        return tuple(cast(float(v)) if cast is int else cast(v) for v in str(raw).replace(",", " ").split())
    if isinstance(default, int):
        return int(float(raw))
    return type(default)(raw)


def _section_dataclass(cls, section, name):
    known = {f.name for f in fields(cls)}
    proto = cls()
    kw = {}
    for key, raw in dict(section).items():
        if key not in known:
            raise ValueError(f"unknown [{name}] key {key!r}")
        kw[key] = _coerce(getattr(proto, key), raw)
    return cls(**kw)


def config_from_parser(parser: configparser.ConfigParser) -> RunConfig:
    missing = [s for s in SECTIONS if s not in parser]
    if missing:
        raise ValueError(f"config is missing sections: {missing}")
    scene = sim2d.scene_from_section(parser["scene"])
    run_sec = dict(parser["run"])
    if "iterations" not in run_sec:
        run_sec["iterations"] = str(DEFAULT_ITERATIONS.get(scene.task, 1500))
    return RunConfig(
        scene=scene,
        ppo=ppo.PPOConfig.from_section(parser["ppo"]),
        reward=rewards.RewardConfig.from_section(scene.task, parser["reward"]),
        dynamics=_section_dataclass(DynamicsConfig, parser["dynamics"], "dynamics"),
        run=_section_dataclass(RunSettings, run_sec, "run"),
    )


def read_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    return config_from_parser(parser)


def default_config(task="single_object", mode="caiman", **run) -> RunConfig:
    parser = configparser.ConfigParser()
    for s in SECTIONS:
        parser.add_section(s)
    parser["scene"]["task"] = task
    parser["reward"]["mode"] = mode
    for k, v in run.items():
        parser["run"][k] = str(v)
    return config_from_parser(parser)


def config_parser(cfg: RunConfig) -> configparser.ConfigParser:
    """The INI form of ``cfg``; reading it back gives an equal config."""
    parser = configparser.ConfigParser()
    s = cfg.scene
    parser["scene"] = {
        "task": s.task,
        "target_x_range": f"{s.target_x[0]!r} {s.target_x[1]!r}",
        "target_y_range": f"{s.target_y[0]!r} {s.target_y[1]!r}",
        "episode_length_s": repr(s.episode_length_s),
        "object_mass": repr(s.object_mass),
        "object_friction": repr(s.object_friction),
        "object_half_extent": repr(s.object_half_extent),
        "robot_radius": repr(s.robot_radius),
    }
    for name in SECTIONS[1:]:
        d = asdict(getattr(cfg, name))
        parser[name] = {k: " ".join(map(repr, v)) if isinstance(v, (tuple, list)) else str(v) for k, v in d.items()}
    return parser


def write_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        config_parser(cfg).write(fh)


# --- observation scaling -----------------------------------------------------


def obs_scale(n_walls, pos=2.0):
    head = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, pos, pos, math.pi, pos, pos, math.pi, pos, pos, 1.0, 1.0, 1.0]
    return np.array(head + [pos, pos, math.pi] * n_walls)


# --- models per mode -------------------------------------------------------


def make_dynamics(cfg: RunConfig, seed):
    """Transition model used for CAI, or ``None`` for the non-CAI modes."""
    mode = cfg.mode
    if mode not in rewards.CAI_MODES:
        return None
    d = cfg.dynamics
    return dynmodel.ResidualDynamics(
        hidden_sizes=d.hidden_sizes,
        use_prior=mode != "cai_learned",
        use_residual=mode != "cai_kinematic",
        sigma=d.sigma, eps_p=d.eps_p, lr=d.lr, batch_size=d.batch_size,
        epochs=d.epochs, random_state=seed,
    ).initialize()


_HELDOUT_CACHE = {}


def heldout_set(scene: sim2d.SceneConfig, size=HELDOUT_SIZE):
    """Fixed scripted transitions for tracking dynamics accuracy (same for every run of a scene)."""
    key = (scene, size)
    if key not in _HELDOUT_CACHE:
        _HELDOUT_CACHE[key] = scripted_dataset(scene, size, HELDOUT_SEED)
    return _HELDOUT_CACHE[key]


# --- evaluation ----------------------------------------------------------------


def run_episodes(agent, scene: sim2d.SceneConfig, episodes, seed):
    """Roll ``agent(obs, world) -> action`` for one episode in ``episodes`` parallel worlds."""
    world = sim2d.load_scene(scene, np.random.default_rng(seed), n=episodes)
    prev = np.zeros((episodes, 3))
    for _ in range(scene.hl_steps_per_episode):
        a = sim2d.clip_action(agent(sim2d.observe(world, prev), world))
        world = sim2d.hl_step(world, a)
        prev = a
    return world


def evaluate(policy_state, scene: sim2d.SceneConfig, episodes=200, seed=0):
    """Success rate of the deterministic (mean-action) policy."""
    if isinstance(policy_state, (str, Path)):
        policy_state, _ = ppo.load_policy(policy_state)
    world = run_episodes(lambda obs, w: ppo.act_deterministic(policy_state, obs), scene, episodes, seed)
    return float(np.mean(sim2d.is_success(world)))


def evaluate_agent(agent, scene, episodes=200, seed=0):
    return float(np.mean(sim2d.is_success(run_episodes(agent, scene, episodes, seed))))


def scripted_agent(obs, world):
    return push_command(world)


def random_agent(seed):
    rng = np.random.default_rng(seed)
    return lambda obs, world: rng.uniform(-1.0, 1.0, size=(obs.shape[0], 3))


def evaluate_checkpoint(path, episodes=None, seed=None):
    policy_state, meta = ppo.load_policy(path)
    if "config" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no run configuration")
    parser = configparser.ConfigParser()
    parser.read_dict(meta["config"])
    cfg = config_from_parser(parser)
    episodes = cfg.run.eval_episodes if episodes is None else episodes
    seed = meta.get("eval_seed", 0) if seed is None else seed
    return evaluate(policy_state, cfg.scene, episodes, seed)


# --- training ----------------------------------------------------------------


def _fmt(x):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return "nan"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"


def _config_sections(cfg: RunConfig):
    parser = config_parser(cfg)
    return {sec: dict(parser[sec]) for sec in parser.sections()}


@dataclass
class TrainResult:
    out_dir: Path
    rows: list
    env_steps: int
    policy: object = None
    model: object = None


class Trainer:
    """Single-threaded training loop; every random stream derives from ``cfg.run.seed``."""

    def __init__(self, cfg: RunConfig, out_dir=None, residual_init=None):
        self.cfg = cfg
        self.out_dir = Path(out_dir if out_dir is not None else cfg.run.output_dir)
        seed = cfg.run.seed
        ss = np.random.SeedSequence(seed)
        (s_scene, s_noise, s_ppo, s_cai, s_dyn, s_pol, s_rnd, s_model) = ss.spawn(8)
        self.rng_scene = np.random.default_rng(s_scene)
        self.rng_ppo = np.random.default_rng(s_ppo)
        self.rng_cai = np.random.default_rng(s_cai)
        self.rng_dyn = np.random.default_rng(s_dyn)
        self.eval_seed = seed + EVAL_SEED_OFFSET
        E = cfg.run.num_envs
        self.horizon = cfg.scene.hl_steps_per_episode
        self.noise = ppo.ColoredNoiseState(E, self.horizon, 3, cfg.ppo.noise_beta, np.random.default_rng(s_noise))
        n_obs = sim2d.obs_dim(cfg.scene.n_walls)
        self.policy = ppo.PolicyState.create(n_obs, cfg.ppo, s_pol, obs_scale(cfg.scene.n_walls))
        self.model = make_dynamics(cfg, int(s_model.generate_state(1)[0]))
        if residual_init is not None:
            if self.model is None or not self.model.use_residual:
                raise ValueError(f"mode {cfg.mode!r} has no residual to initialize")
            dynmodel.load_residual(residual_init, into=self.model)
        self.cai_cfg = CaiConfig(cfg.dynamics.n_actions, tuple(cfg.dynamics.delta_v))
        self.buffer = dynmodel.DynBuffer(cfg.dynamics.buffer_capacity) if (
            self.model is not None and self.model.use_residual) else None
        self.rnd = None
        if cfg.mode in rewards.RND_MODES:
            self.rnd = rewards.RND(n_steps=cfg.run.rnd_steps, normalize=cfg.run.rnd_normalize,
                                   random_state=int(s_rnd.generate_state(1)[0]))
        self.world = sim2d.load_scene(cfg.scene, self.rng_scene, n=E)
        # stagger the first episode so a rollout window covers all phases of an episode
        offset = self.rng_scene.integers(0, self.horizon, size=E) * sim2d.HL_DT
        self.world = replace(self.world, time=offset)
        self.prev_action = np.zeros((E, 3))
        self.env_steps = 0
        self.last_stats = {}
        self.last_rollout = {}

    # -- rollout ---------------------------------------------------------
    def _bonus(self, next_world, next_obs):
        mode = self.cfg.mode
        if mode in rewards.CAI_MODES:
            return {"r_cai": cai_score(self.model, sim2d.extract_hl_state(next_world), self.cai_cfg, self.rng_cai)}
        if mode in rewards.RND_MODES:
            states = sim2d.extract_hl_state(next_world).to_array()
            x = rewards.rnd_inputs(mode, next_obs / self.policy.obs_scale, states,
                                   velocity=self.cfg.run.rnd_object_velocity)
            return {"r_rnd": self.rnd.reward(x), "_rnd_x": x}
        return {"r_heu": rewards.heuristics_reward(next_world.robot_pose[:, :2], next_world.object_pose[:, :2])}

    def collect(self):
        cfg = self.cfg
        T, E = cfg.run.steps_per_iteration, cfg.run.num_envs
        n_obs = sim2d.obs_dim(cfg.scene.n_walls)
        obs_buf = np.zeros((T, E, n_obs))
        raw_buf = np.zeros((T, E, 3))
        logp_buf = np.zeros((T, E))
        rew_buf = np.zeros((T, E))
        val_buf = np.zeros((T, E))
        done_buf = np.zeros((T, E))
        mean_buf = np.zeros((T, E, 3))
        cai_vals, rnd_x, reward_log = [], [], []
        obs = sim2d.observe(self.world, self.prev_action)
        for t in range(T):
            eps = self.noise.next()
            action, raw, logp, value, mean = ppo.act(self.policy, obs, eps)
            nxt = sim2d.hl_step(self.world, action)
            if self.buffer is not None:
                dynmodel.push_transition(self.buffer, self.world, nxt)
            nxt_obs = sim2d.observe(nxt, action)
            bonus = self._bonus(nxt, nxt_obs)
            r_task = rewards.task_reward(nxt.object_pose[:, :2], nxt.target, cfg.reward)
            r_reg = rewards.action_reg(action, self.prev_action)
            r = rewards.total_reward(cfg.mode, cfg.reward, r_task, r_reg,
                                     **{k: v for k, v in bonus.items() if not k.startswith("_")})
            if "r_cai" in bonus:
                cai_vals.append(bonus["r_cai"])
            if "_rnd_x" in bonus:
                rnd_x.append(bonus["_rnd_x"])
            done = nxt.time >= cfg.scene.episode_length_s - 1e-9
            reward_log.append(r)
            if done.any():
                # timeouts are not terminal: bootstrap from the final observation
                r = r + cfg.ppo.gamma * np.where(done, self.policy.value(nxt_obs), 0.0)
            if not np.all(np.isfinite(r)):
                raise sim2d.NumericFault("non-finite reward")
            obs_buf[t], raw_buf[t], logp_buf[t] = obs, raw, logp
            rew_buf[t], val_buf[t], done_buf[t], mean_buf[t] = r, value, done, mean
            if done.any():
                fresh = sim2d.load_scene(cfg.scene, self.rng_scene, n=E)
                nxt = nxt.where(done, fresh)
                action = np.where(done[:, None], 0.0, action)
                self.noise.reset(done)
                nxt_obs = sim2d.observe(nxt, action)
            self.world, self.prev_action, obs = nxt, action, nxt_obs
            self.env_steps += E
        last_values = self.policy.value(obs)
        batch = ppo.RolloutBatch(obs_buf, raw_buf, logp_buf, rew_buf, val_buf, done_buf, mean_buf, last_values)
        self.last_rollout = {
            "mean_total_reward": float(np.mean(reward_log)),
            "mean_cai": float(np.mean(cai_vals)) if cai_vals else float("nan"),
        }
        return batch, rnd_x

    def iterate(self):
        batch, rnd_x = self.collect()
        self.policy, self.last_stats = ppo.ppo_update(self.policy, batch, self.cfg.ppo, self.rng_ppo)
        if self.rnd is not None and rnd_x:
            self.rnd.partial_fit(np.concatenate(rnd_x))
        if self.buffer is not None:
            d = self.cfg.dynamics
            dynmodel.train_residual(self.model, self.buffer, d.epochs, d.batch_size, d.lr, self.rng_dyn)

    # -- bookkeeping ---------------------------------------------------------
    def heldout_mse(self):
        if self.model is None:
            return float("nan")
        X, y = heldout_set(self.cfg.scene)
        return dynmodel.mse(self.model, X, y)

    def metrics_row(self, iteration):
        return {
            "iteration": iteration,
            "mean_total_reward": self.last_rollout.get("mean_total_reward", float("nan")),
            "success_rate": evaluate(self.policy, self.cfg.scene, self.cfg.run.eval_episodes, self.eval_seed),
            "mean_cai": self.last_rollout.get("mean_cai", float("nan")),
            "dynamics_heldout_mse": self.heldout_mse(),
            "policy_kl": self.last_stats.get("kl", float("nan")),
            "lr": self.policy.lr,
        }

    def save_checkpoint(self, iteration):
        ck = self.out_dir / "checkpoints"
        ck.mkdir(parents=True, exist_ok=True)
        meta = {"iteration": iteration, "eval_seed": self.eval_seed, "config": _config_sections(self.cfg)}
        ppo.save_policy(self.policy, ck / f"policy_{iteration:06d}.ckpt", meta)
        if self.model is not None and self.model.use_residual:
            dynmodel.save_residual(self.model, ck / f"residual_{iteration:06d}.ckpt")

    def dump_diagnostics(self, iteration, exc):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        diag = {
            "iteration": iteration,
            "error": f"{type(exc).__name__}: {exc}",
            "last_ppo_stats": self.last_stats,
            "last_rollout": self.last_rollout,
            "policy_log_std": self.policy.log_std.tolist(),
            "policy_lr": self.policy.lr,
            "finite_policy": bool(np.all(np.isfinite(self.policy.mean_net.flat))),
        }
        with open(self.out_dir / "diagnostics.json", "w") as fh:
            json.dump(diag, fh, indent=2, default=str)

    def run(self, progress=None) -> TrainResult:
        cfg = self.cfg
        self.out_dir.mkdir(parents=True, exist_ok=True)
        write_config(cfg, self.out_dir / "config.ini")
        metrics_path = self.out_dir / "metrics.csv"
        timing_path = self.out_dir / "timing.csv"
        rows = []
        t0 = time.perf_counter()
        eval_points = set(range(0, cfg.run.iterations + 1, max(1, cfg.run.eval_every))) | {cfg.run.iterations}
        with open(metrics_path, "w", newline="") as mf, open(timing_path, "w", newline="") as tf:
            mw = csv.writer(mf, lineterminator="\n")
            tw = csv.writer(tf, lineterminator="\n")
            mw.writerow(METRICS_HEADER)
            tw.writerow(("iteration", "wall_clock_s", "env_steps"))
            for it in range(cfg.run.iterations + 1):
                if it in eval_points:
                    row = self.metrics_row(it)
                    rows.append(row)
                    mw.writerow([_fmt(row[k]) for k in METRICS_HEADER])
                    mf.flush()
                    tw.writerow((it, f"{time.perf_counter() - t0:.3f}", self.env_steps))
                    tf.flush()
                    self.save_checkpoint(it)
                    if progress:
                        progress(row)
                if it == cfg.run.iterations:
                    break
                try:
                    self.iterate()
                except (FloatingPointError, sim2d.NumericFault, ppo.PPOFault) as exc:
                    self.dump_diagnostics(it, exc)
                    raise TrainingFault(f"iteration {it}: {exc}; see {self.out_dir / 'diagnostics.json'}") from exc
        summary = {
            "config_digest": cfg.digest(),
            "iterations": cfg.run.iterations,
            "env_steps": self.env_steps,
            "num_envs": cfg.run.num_envs,
            "steps_per_iteration": cfg.run.steps_per_iteration,
            "final_success_rate": rows[-1]["success_rate"],
            "wall_clock_s": round(time.perf_counter() - t0, 3),
            "complete": True,
        }
        with open(self.out_dir / "run.json", "w") as fh:
            json.dump(summary, fh, indent=2)
        return TrainResult(self.out_dir, rows, self.env_steps, self.policy, self.model)


def train(cfg: RunConfig, out_dir=None, residual_init=None, progress=None) -> TrainResult:
    return Trainer(cfg, out_dir, residual_init).run(progress)


def read_metrics(path):
    with open(path) as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def is_complete(out_dir, cfg: RunConfig):
    p = Path(out_dir) / "run.json"
    if not p.exists() or not (Path(out_dir) / "metrics.csv").exists():
        return False
    try:
        info = json.loads(p.read_text())
    except json.JSONDecodeError:
        return False
    return info.get("complete") and info.get("config_digest") == cfg.digest()


# --- suites ------------------------------------------------------------------


def cell_dir(root, task, mode, seed):
    return Path(root) / task / mode / f"seed_{seed}"


def run_suite(tasks, modes, seeds, root="runs/suite", base=None, overrides=None, plot=True, progress=None):
    """Train every (task, mode, seed) cell (completed cells are reused) and aggregate per task."""
    overrides = dict(overrides or {})
    results = {}
    for task in tasks:
        for mode in modes:
            for seed in seeds:
                cfg = cell_config(task, mode, seed, base, overrides)
                out = cell_dir(root, task, mode, seed)
                if not is_complete(out, cfg):
                    log.info("training %s / %s / seed %s", task, mode, seed)
                    train(cfg, out, progress=progress)
                results[(task, mode, seed)] = read_metrics(out / "metrics.csv")
        aggregate_task(root, task, modes, seeds, plot=plot)
    return results


def cell_config(task, mode, seed, base=None, overrides=None):
    overrides = dict(overrides or {})
    if base is None:
        cfg = default_config(task, mode)
    else:
        cfg = replace(
            base,
            scene=sim2d.SceneConfig.for_task(task) if base.scene.task != task else base.scene,
            reward=rewards.RewardConfig.for_task(
                task, **{k: v for k, v in asdict(base.reward).items() if k != "w1"}
            ).with_mode(mode) if base.scene.task != task else base.reward.with_mode(mode),
        )
    return cfg.with_seed(seed).with_run(**overrides)


def aggregate_task(root, task, modes, seeds, plot=True):
    """Per-mode mean/std success curves. Missing cells leave gaps instead of failing."""
    root = Path(root)
    rows = []
    curves = {}
    for mode in modes:
        per_seed = {}
        for seed in seeds:
            p = cell_dir(root, task, mode, seed) / "metrics.csv"
            if p.exists():
                per_seed[seed] = {int(r["iteration"]): r["success_rate"] for r in read_metrics(p)}
        iters = sorted(set().union(*[set(v) for v in per_seed.values()])) if per_seed else []
        curve = []
        for it in iters:
            vals = [per_seed[s][it] for s in seeds if s in per_seed and it in per_seed[s]]
            m, sd = float(np.mean(vals)), float(np.std(vals))
            curve.append((it, m, sd, len(vals)))
            rows.append((mode, it, m, sd, len(vals)))
        curves[mode] = curve
        if not per_seed:
            rows.append((mode, "", "", "", 0))
    (root / task).mkdir(parents=True, exist_ok=True)
    with open(root / task / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("mode", "iteration", "success_mean", "success_std", "n_seeds"))
        for r in rows:
            w.writerow([_fmt(x) if isinstance(x, float) else x for x in r])
    if plot:
        plot_curves(curves, task, root / task / "success_rate.png")
    return curves


def plot_curves(curves, title, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for mode, curve in curves.items():
        if not curve:
            ax.plot([], [], label=f"{mode} (missing)")
            continue
        it, m, sd, _ = map(np.array, zip(*curve))
        ax.plot(it, m, label=mode)
        ax.fill_between(it, np.clip(m - sd, 0, 1), np.clip(m + sd, 0, 1), alpha=0.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# --- transfer ----------------------------------------------------------------


def iterations_to(rows, threshold=0.5):
    """First evaluated iteration with success at or above ``threshold`` (inf if never)."""
    for r in rows:
        if r["success_rate"] >= threshold:
            return r["iteration"]
    return math.inf


def transfer_run(residual_path, cfg: RunConfig, seeds=(0,), root="runs/transfer", threshold=0.5, progress=None):
    """Fine-tune a pretrained residual on ``cfg``'s scene next to a from-scratch control."""
    # fail on a bad checkpoint before any training starts
    probe = make_dynamics(cfg, 0)
    if probe is None or not probe.use_residual:
        raise ValueError(f"transfer needs a mode with a learned residual, not {cfg.mode!r}")
    dynmodel.load_residual(residual_path, into=probe)
    root = Path(root)
    summary = {"transfer": {}, "scratch": {}}
    for seed in seeds:
        c = cfg.with_seed(seed)
        for arm, init in (("transfer", residual_path), ("scratch", None)):
            out = root / arm / f"seed_{seed}"
            marker = {"residual": str(residual_path)} if init else {}
            if not (is_complete(out, c) and _marker_matches(out, marker)):
                train(c, out, residual_init=init, progress=progress)
                (out / "init.json").write_text(json.dumps(marker))
            rows = read_metrics(out / "metrics.csv")
            summary[arm][seed] = {
                "iterations_to_threshold": iterations_to(rows, threshold),
                "initial_heldout_mse": rows[0]["dynamics_heldout_mse"],
                "final_success_rate": rows[-1]["success_rate"],
            }
    med = {arm: float(np.median([v["iterations_to_threshold"] for v in summary[arm].values()])) for arm in summary}
    summary["median_iterations_to_threshold"] = med
    summary["threshold"] = threshold
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "transfer_summary.json", "w") as fh:
        json.dump(_finite_or_none(summary), fh, indent=2)
    return summary


def _finite_or_none(obj):
    # json would write bare Infinity, which strict parsers reject
    if isinstance(obj, dict):
        return {str(k): _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _marker_matches(out, marker):
    p = Path(out) / "init.json"
    if not p.exists():
        return False
    return json.loads(p.read_text()) == marker
