import csv
import json
import math
import shutil

import numpy as np
import pytest

from causalpush import cli, dynmodel, harness, sim2d
from causalpush.checkpoint import CheckpointError

TINY = dict(num_envs=4, iterations=3, eval_every=1, eval_episodes=6)


def tiny(task="single_object", mode="heuristics", **kw):
    return harness.default_config(task, mode, **{**TINY, **kw})


def test_defaults_follow_training_protocol():
    cfg = harness.default_config("single_object", "caiman")
    assert cfg.scene.hl_steps_per_episode == 100
    assert cfg.run.steps_per_iteration == 10
    assert cfg.run.iterations == 1500 and cfg.run.eval_every == 100
    assert harness.default_config("multi_wall", "caiman").run.iterations == 2000
    assert (cfg.run.num_envs, cfg.run.eval_episodes) == (256, 200)
    assert cfg.reward.w1 == 15.0 and harness.default_config("single_wall").reward.w1 == 40.0


def test_config_round_trip(tmp_path):
    cfg = harness.default_config("single_wall", "rnd_object", seed=7, num_envs=32)
    path = tmp_path / "c.ini"
    harness.write_config(cfg, path)
    back = harness.read_config(path)
    assert back == cfg
    assert back.digest() == cfg.digest()
    assert cfg.with_run(output_dir="elsewhere").digest() == cfg.digest()
    assert cfg.with_seed(8).digest() != cfg.digest()


def test_config_errors(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[scene]\ntask = single_object\n[ppo]\n[reward]\n[dynamics]\n")
    with pytest.raises(ValueError, match="missing sections"):
        harness.read_config(p)
    p.write_text("[scene]\ntask = single_object\n[ppo]\n[reward]\n[dynamics]\nwidth = 3\n[run]\n")
    with pytest.raises(ValueError, match="unknown"):
        harness.read_config(p)
    with pytest.raises(FileNotFoundError):
        harness.read_config(tmp_path / "nope.ini")


def test_user_config_keys_parse(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text(
        "[scene]\ntask = single_wall\n"
        "[ppo]\nhidden_sizes = 32, 16\nclip_param = 0.1\n"
        "[reward]\nmode = cai_kinematic\n"
        "[dynamics]\nhidden_sizes = 16 16\nbatch_size = 256\n"
        "[run]\nseed = 3\nnum_envs = 8\n"
    )
    cfg = harness.read_config(p)
    assert cfg.ppo.hidden_sizes == (32, 16) and cfg.ppo.clip_param == 0.1
    assert cfg.mode == "cai_kinematic" and cfg.reward.w1 == 40.0
    assert cfg.dynamics.hidden_sizes == (16, 16) and cfg.dynamics.batch_size == 256
    assert (cfg.run.seed, cfg.run.num_envs, cfg.run.iterations) == (3, 8, 1500)


def test_models_per_mode():
    assert harness.make_dynamics(tiny(mode="heuristics"), 0) is None
    assert harness.make_dynamics(tiny(mode="rnd_full"), 0) is None
    m = harness.make_dynamics(tiny(mode="caiman"), 0)
    assert m.use_prior and m.use_residual
    m = harness.make_dynamics(tiny(mode="cai_kinematic"), 0)
    assert m.use_prior and not m.use_residual
    m = harness.make_dynamics(tiny(mode="cai_learned"), 0)
    assert not m.use_prior and m.use_residual


@pytest.mark.parametrize("mode", ["caiman", "rnd_object", "heuristics"])
def test_same_seed_same_metrics_bytes(tmp_path, mode):
    cfg = tiny(mode=mode, seed=5)
    harness.train(cfg, tmp_path / "a")
    harness.train(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    harness.train(cfg.with_seed(6), tmp_path / "c")
    assert a != (tmp_path / "c" / "metrics.csv").read_bytes()


def test_run_outputs_and_accounting(tmp_path):
    cfg = tiny(mode="caiman", iterations=4, eval_every=2)
    res = harness.train(cfg, tmp_path / "run")
    assert res.env_steps == 4 * 10 * 4
    with open(tmp_path / "run" / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == harness.METRICS_HEADER
    assert [int(r[0]) for r in rows[1:]] == [0, 2, 4]
    info = json.loads((tmp_path / "run" / "run.json").read_text())
    assert info["env_steps"] == 160 and info["complete"]
    assert harness.is_complete(tmp_path / "run", cfg)
    assert not harness.is_complete(tmp_path / "run", cfg.with_seed(1))
    timing = harness.read_metrics(tmp_path / "run" / "timing.csv")
    assert [t["env_steps"] for t in timing] == [0, 80, 160]
    ck = sorted(p.name for p in (tmp_path / "run" / "checkpoints").iterdir())
    assert "policy_000004.ckpt" in ck and "residual_000004.ckpt" in ck
    for r in res.rows:
        assert 0.0 <= r["success_rate"] <= 1.0
    assert math.isnan(res.rows[0]["mean_cai"]) and res.rows[-1]["mean_cai"] >= 0.0


def test_checkpoints_reload_to_logged_success(tmp_path):
    cfg = tiny(mode="heuristics", iterations=2, eval_episodes=20)
    res = harness.train(cfg, tmp_path / "run")
    for row in res.rows:
        path = tmp_path / "run" / "checkpoints" / f"policy_{int(row['iteration']):06d}.ckpt"
        rate = harness.evaluate_checkpoint(path)
        assert abs(rate - row["success_rate"]) <= 0.02
        assert harness.evaluate_checkpoint(path) == rate


def test_scripted_oracle_always_succeeds():
    scene = sim2d.SceneConfig.for_task("single_object")
    assert harness.evaluate_agent(harness.scripted_agent, scene, 200, seed=0) == 1.0


def test_random_agent_rarely_succeeds_on_multi_wall():
    scene = sim2d.SceneConfig.for_task("multi_wall")
    assert harness.evaluate_agent(harness.random_agent(0), scene, 200, seed=0) < 0.05


def test_random_agent_is_reproducible():
    scene = sim2d.SceneConfig.for_task("single_object")
    a = harness.run_episodes(harness.random_agent(3), scene, 5, seed=1)
    b = harness.run_episodes(harness.random_agent(3), scene, 5, seed=1)
    np.testing.assert_array_equal(a.object_pose, b.object_pose)


def test_fault_writes_diagnostics(tmp_path, monkeypatch):
    cfg = tiny(mode="heuristics")
    tr = harness.Trainer(cfg, tmp_path / "run")
    monkeypatch.setattr(harness.rewards, "task_reward", lambda *a: np.full(4, np.nan))
    with pytest.raises(harness.TrainingFault):
        tr.run()
    diag = json.loads((tmp_path / "run" / "diagnostics.json").read_text())
    assert diag["iteration"] == 0 and "non-finite reward" in diag["error"]


def test_suite_cell_count_and_gaps(tmp_path):
    tasks = ["single_object", "single_wall", "multi_wall"]
    modes = list(harness.rewards.MODES)
    over = dict(num_envs=2, iterations=1, eval_every=1, eval_episodes=2)
    harness.run_suite(tasks, modes, [0, 1, 2], root=tmp_path, overrides=over)
    runs = [p for p in tmp_path.glob("*/*/seed_*") if (p / "metrics.csv").exists()]
    assert len(runs) == 54
    assert len(list(tmp_path.glob("*/success_rate.png"))) == 3
    # cells are reused; a vanished cell becomes a gap in the aggregate
    stamp = (tmp_path / "single_object" / "caiman" / "seed_0" / "metrics.csv").stat().st_mtime_ns
    shutil.rmtree(tmp_path / "single_object" / "heuristics")
    curves = harness.aggregate_task(tmp_path, "single_object", modes, [0, 1, 2])
    assert curves["heuristics"] == []
    assert all(n == 3 for (_, _, _, n) in curves["caiman"])
    with open(tmp_path / "single_object" / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert any(r["mode"] == "heuristics" and r["n_seeds"] == "0" for r in rows)
    harness.run_suite(["single_object"], ["caiman"], [0], root=tmp_path, overrides=over)
    assert (tmp_path / "single_object" / "caiman" / "seed_0" / "metrics.csv").stat().st_mtime_ns == stamp


def test_iterations_to_threshold():
    rows = [{"iteration": 0, "success_rate": 0.0}, {"iteration": 100, "success_rate": 0.6}]
    assert harness.iterations_to(rows, 0.5) == 100
    assert harness.iterations_to(rows, 0.7) == math.inf


def test_transfer_rejects_malformed_checkpoint_before_training(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    cfg = tiny("single_wall_random_target", "caiman")
    with pytest.raises(CheckpointError):
        harness.transfer_run(bad, cfg, seeds=[0], root=tmp_path / "t")
    assert not (tmp_path / "t").exists()
    with pytest.raises(ValueError):
        harness.transfer_run(bad, tiny("single_wall_random_target", "heuristics"), root=tmp_path / "t")


def test_transfer_loads_residual_and_lowers_initial_error(tmp_path):
    from causalpush.scripted import scripted_dataset

    scene = sim2d.SceneConfig.for_task("single_wall")
    X, y = scripted_dataset(scene, 20000, seed=3)
    pre = dynmodel.ResidualDynamics(lr=1e-3, batch_size=1024, epochs=10, random_state=0).fit(X, y)
    path = dynmodel.save_residual(pre, tmp_path / "res.ckpt")
    cfg = tiny("single_wall_random_target", "caiman", iterations=2, eval_every=2)
    summary = harness.transfer_run(path, cfg, seeds=[0], root=tmp_path / "t")
    t, s = summary["transfer"][0], summary["scratch"][0]
    assert t["initial_heldout_mse"] < s["initial_heldout_mse"]
    saved = json.loads((tmp_path / "t" / "transfer_summary.json").read_text())
    assert set(saved["median_iterations_to_threshold"]) == {"transfer", "scratch"}


def _write_cfg(tmp_path, mode="heuristics"):
    cfg = tiny(mode=mode)
    path = tmp_path / "c.ini"
    harness.write_config(cfg, path)
    return path


def test_cli_train_and_eval(tmp_path, capsys):
    cfg_path = _write_cfg(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["train", "--config", str(cfg_path), "--seed", "2", "--out", str(out), "--quiet"]) == 0
    assert harness.read_config(out / "config.ini").run.seed == 2
    ck = out / "checkpoints" / "policy_000003.ckpt"
    assert cli.main(["eval", "--checkpoint", str(ck), "--episodes", "5"]) == 0
    assert "success_rate" in capsys.readouterr().out


def test_cli_suite_and_transfer_errors(tmp_path, capsys):
    cfg_path = _write_cfg(tmp_path)
    code = cli.main(["suite", "--tasks", "single_object", "--modes", "heuristics", "--seeds", "0",
                     "--config", str(cfg_path), "--out", str(tmp_path / "s"), "--quiet"])
    assert code == 0
    assert (tmp_path / "s" / "single_object" / "comparison.csv").exists()
    bad = tmp_path / "bad.ckpt"
    bad.write_text("nope")
    tcfg = tmp_path / "t.ini"
    harness.write_config(tiny("single_wall_random_target", "caiman"), tcfg)
    assert cli.main(["transfer", "--residual", str(bad), "--config", str(tcfg), "--out", str(tmp_path / "t")]) == 2
    assert cli.main(["eval", "--checkpoint", str(bad)]) == 2
    assert "error" in capsys.readouterr().err
