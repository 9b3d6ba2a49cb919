import json

import numpy as np
import pytest

from optight import cli, envs
from optight.qfunc import TabularQ, load_q, save_q

CORRIDOR = """
[env]
name = corridor
length = 8

[training]
gamma = 0.9
episodes = 30
seed = 0
eval_every = 10
eval_episodes = 5

[penalty]
lambda = {lam}
k = 4
"""

CHAIN_MDP = """states 3
actions 2
terminal 2
0 0 0 1 0
0 1 1 1 0
1 0 0 1 0
1 1 2 1 1
"""


def _config(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestTrain:
    def test_two_seeds_write_files(self, tmp_path, capsys):
        cfg = _config(tmp_path, CORRIDOR.format(lam=4))
        code, out, _ = _run(capsys, "train", "--config", cfg, "--seeds", 2, "--out", tmp_path / "runs")
        assert code == 0
        for seed in (0, 1):
            run = tmp_path / "runs" / f"seed_{seed}"
            log = (run / "train_log.csv").read_text().splitlines()
            assert log[0] == "step,episode,episode_return,loss_mean,epsilon,sync_count,eval_score"
            assert len(log) == 31
            summary = json.loads((run / "summary.json").read_text())
            assert summary["status"] == "ok" and summary["mode"] == "optimality-tightening"
            assert summary["seed"] == seed
            assert summary["eval_best"] is not None and summary["eval_final"] is not None
            assert isinstance(load_q(run / "ckpt_final.npz"), TabularQ)
        assert out.count("ok") == 2

    def test_baseline_label(self, tmp_path, capsys):
        cfg = _config(tmp_path, CORRIDOR.format(lam=0))
        assert _run(capsys, "train", "--config", cfg, "--out", tmp_path / "runs")[0] == 0
        summary = json.loads((tmp_path / "runs" / "seed_0" / "summary.json").read_text())
        assert summary["mode"] == "dqn-baseline"

    def test_rerun_byte_identical(self, tmp_path, capsys):
        cfg = _config(tmp_path, CORRIDOR.format(lam=4))
        for name in ("a", "b"):
            assert _run(capsys, "train", "--config", cfg, "--out", tmp_path / name)[0] == 0
        a = (tmp_path / "a" / "seed_0" / "train_log.csv").read_bytes()
        b = (tmp_path / "b" / "seed_0" / "train_log.csv").read_bytes()
        assert a == b

    def test_parallel_workers_match_serial(self, tmp_path, capsys):
        cfg = _config(tmp_path, CORRIDOR.format(lam=4))
        _run(capsys, "train", "--config", cfg, "--seeds", 2, "--out", tmp_path / "serial")
        _run(capsys, "train", "--config", cfg, "--seeds", 2, "--workers", 2, "--out", tmp_path / "par")
        for seed in (0, 1):
            rel = f"seed_{seed}/train_log.csv"
            assert (tmp_path / "serial" / rel).read_bytes() == (tmp_path / "par" / rel).read_bytes()

    def test_env_var_output_root(self, tmp_path, capsys, monkeypatch):
        cfg = _config(tmp_path, CORRIDOR.format(lam=4).replace("episodes = 30", "episodes = 3"))
        monkeypatch.setenv(cli.OUT_ENV_VAR, str(tmp_path / "envroot"))
        assert _run(capsys, "train", "--config", cfg)[0] == 0
        assert (tmp_path / "envroot" / "seed_0" / "train_log.csv").exists()

    @pytest.mark.parametrize("text, needle", [
        ("[training]\ngamma = 1.5\n", "gamma"),
        ("[training]\nbatch_size = many\n", "batch_size"),
        ("[training]\nwarp = 9\n", "warp"),
        ("[bogus]\nx = 1\n", "bogus"),
        ("[env]\nname = tetris\n", "tetris"),
        ("[env]\nname = maze\nwidth = 3\n", "height"),
    ])
    def test_bad_config(self, tmp_path, capsys, text, needle):
        cfg = _config(tmp_path, text)
        code, _, err = _run(capsys, "train", "--config", cfg, "--out", tmp_path / "runs")
        assert code == 2
        assert needle in err

    def test_missing_config_file(self, tmp_path, capsys):
        assert _run(capsys, "train", "--config", tmp_path / "nope.ini")[0] == 2

    def test_divergence_exit(self, tmp_path, capsys):
        text = "[env]\nname = chain\n[training]\ngamma = 0.9\nepisodes = 100000\nmax_steps = 5000\n[optimizer]\nlr = 10\n"
        cfg = _config(tmp_path, text)
        code, out, _ = _run(capsys, "train", "--config", cfg, "--out", tmp_path / "runs")
        assert code == 3
        assert "train_log.csv" in out
        summary = json.loads((tmp_path / "runs" / "seed_0" / "summary.json").read_text())
        assert summary["status"] == "diverged"
        assert (tmp_path / "runs" / "seed_0" / "train_log.csv").exists()

    def test_checkpoints_and_dump(self, tmp_path, capsys):
        text = CORRIDOR.format(lam=4) + "\n[experiment]\ncheckpoint_every = 500\ndump_replay = yes\n"
        cfg = _config(tmp_path, text.replace("episodes = 30", "episodes = 100000\nmax_steps = 1000"))
        assert _run(capsys, "train", "--config", cfg, "--out", tmp_path / "runs")[0] == 0
        run = tmp_path / "runs" / "seed_0"
        assert (run / "ckpt_step500.npz").exists() and (run / "ckpt_step1000.npz").exists()
        assert (run / "replay.jsonl").exists()


class TestOracle:
    def test_chain(self, tmp_path, capsys):
        mdp = _config(tmp_path, CHAIN_MDP, "chain.mdp")
        code, out, _ = _run(capsys, "oracle", "--mdp", mdp, "--gamma", 0.9, "--tol", 1e-10)
        assert code == 0
        rep = json.loads(out)
        assert rep["q"][0][1] == pytest.approx(0.9, abs=1e-10)
        assert rep["residual"] <= 1e-10

    def test_exported_maze(self, tmp_path, capsys):
        text = "[env]\nname = maze\nwidth = 5\nheight = 4\nwalls = 0,1; 1,1; 2,3\ngoal = 3 4\n"
        cfg = _config(tmp_path, text)
        out_mdp = tmp_path / "maze.mdp"
        assert _run(capsys, "export", "--config", cfg, "--out", out_mdp)[0] == 0
        code, out, _ = _run(capsys, "oracle", "--mdp", out_mdp, "--gamma", 0.95)
        rep = json.loads(out)
        maze = cli.make_env({"name": "maze", "width": "5", "height": "4", "walls": "0,1; 1,1; 2,3", "goal": "3 4"})
        n = envs.shortest_path_length(maze)
        assert rep["v_start"] == pytest.approx(0.95 ** (n - 1), abs=1e-9)

    def test_bad_mdp(self, tmp_path, capsys):
        mdp = _config(tmp_path, "states 2\nactions 1\n0 0 1 0.4 0\n", "bad.mdp")
        assert _run(capsys, "oracle", "--mdp", mdp, "--gamma", 0.9)[0] == 2

    def test_missing_file_is_io_error(self, tmp_path, capsys):
        assert _run(capsys, "oracle", "--mdp", tmp_path / "none.mdp")[0] == 4


class TestScores:
    def test_summary(self, capsys):
        code, out, _ = _run(capsys, "scores", "--mode", "summary")
        assert code == 0
        assert "mean=345.70" in out and "median=105.74" in out and "improved=30" in out

    def test_summary_baseline_column(self, capsys):
        _, out, _ = _run(capsys, "scores", "--mode", "summary", "--column", "baseline")
        assert "mean=241.06" in out and "median=93.52" in out

    def test_normalize(self, capsys):
        code, out, _ = _run(capsys, "scores", "--mode", "normalize")
        games = {g["game"]: g["normalized"] for g in json.loads(out)["games"]}
        assert len(games) == 49
        assert games["Freeway"] == 105.74 and games["Pong"] == 133.67

    def test_improve(self, capsys, tmp_path):
        out_file = tmp_path / "imp.json"
        assert _run(capsys, "scores", "--mode", "improve", "--out", out_file)[0] == 0
        doc = json.loads(out_file.read_text())
        assert doc["summary"]["n_improved"] == 30
        assert sum(g["improvement"] > 0 for g in doc["games"]) == 30

    def test_improve_without_baseline(self, capsys, tmp_path):
        path = _config(tmp_path, "game,random,human,agent\na,0,1,2\n", "s.csv")
        assert _run(capsys, "scores", "--input", path, "--mode", "improve")[0] == 2

    def test_schema_violation(self, capsys, tmp_path):
        path = _config(tmp_path, "game,agent\na,2\n", "s.csv")
        code, _, err = _run(capsys, "scores", "--input", path)
        assert code == 2 and "missing" in err


@pytest.fixture
def trained_run(tmp_path, capsys):
    text = CORRIDOR.format(lam=4) + "\n[experiment]\ndump_replay = yes\n"
    cfg = _config(tmp_path, text)
    assert _run(capsys, "train", "--config", cfg, "--out", tmp_path / "runs")[0] == 0
    mdp_path = tmp_path / "corridor.mdp"
    assert _run(capsys, "export", "--config", cfg, "--out", mdp_path)[0] == 0
    return tmp_path / "runs" / "seed_0", mdp_path


class TestAudit:
    def test_q_star_has_no_lower_violations(self, trained_run, capsys, tmp_path):
        run, mdp_path = trained_run
        q_star = envs.value_iteration(envs.read_mdp(mdp_path), 0.9, 1e-10).q
        ckpt = tmp_path / "qstar.npz"
        save_q(ckpt, TabularQ(*q_star.shape, q_star))
        code, out, _ = _run(capsys, "audit", "--dump", run / "replay.jsonl", "--ckpt", ckpt,
                            "--k", 4, "--mdp", mdp_path, "--records", tmp_path / "audit.jsonl")
        assert code == 0
        rep = json.loads(out)
        assert rep["items"] > 0 and rep["lower_bounds"] > 0
        assert rep["oracle_lower_violations"] == 0
        recs = (tmp_path / "audit.jsonl").read_text().splitlines()
        assert len(recs) == rep["items"]

    def test_k0_evaluates_nothing(self, trained_run, capsys):
        run, _ = trained_run
        code, out, _ = _run(capsys, "audit", "--dump", run / "replay.jsonl", "--ckpt", run / "ckpt_final.npz", "--k", 0)
        assert code == 0
        rep = json.loads(out)
        assert rep["bounds_evaluated"] == 0 and rep["items"] > 0

    def test_corrupted_row(self, trained_run, capsys, tmp_path):
        run, _ = trained_run
        lines = (run / "replay.jsonl").read_text().splitlines()
        lines[4] = lines[4].replace('"r":', '"r_":')
        bad = tmp_path / "bad.jsonl"
        bad.write_text("\n".join(lines) + "\n")
        code, _, err = _run(capsys, "audit", "--dump", bad, "--ckpt", run / "ckpt_final.npz")
        assert code == 2
        assert "line 5" in err

    def test_shape_mismatch(self, trained_run, capsys, tmp_path):
        run, _ = trained_run
        small = tmp_path / "small.npz"
        save_q(small, TabularQ(3, 4))
        code, _, err = _run(capsys, "audit", "--dump", run / "replay.jsonl", "--ckpt", small)
        assert code == 2 and "states" in err

    def test_not_a_checkpoint(self, trained_run, capsys, tmp_path):
        run, _ = trained_run
        junk = tmp_path / "junk.npz"
        junk.write_bytes(b"not a zip")
        assert _run(capsys, "audit", "--dump", run / "replay.jsonl", "--ckpt", junk)[0] == 2


class TestCurve:
    def test_smoothed_log(self, trained_run, capsys):
        run, _ = trained_run
        code, out, _ = _run(capsys, "curve", "--log", run / "train_log.csv", "--window", 4)
        assert code == 0
        rows = [line.split(",") for line in out.splitlines()]
        assert rows[0] == ["step", "raw", "smoothed"]
        raw = np.array([float(r[1]) for r in rows[1:]])
        smooth = np.array([float(r[2]) for r in rows[1:]])
        assert len(raw) == 30
        assert smooth[3] == pytest.approx(raw[:4].mean())

    def test_missing_column(self, trained_run, capsys):
        run, _ = trained_run
        assert _run(capsys, "curve", "--log", run / "train_log.csv", "--column", "nope")[0] == 2
