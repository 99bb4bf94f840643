import csv
import json
import math

import pytest

from catdist import cli, envs
from catdist.distcore import SupportSpec

TINY_TRAIN = {
    "support": {"v_min": -10.0, "v_max": 20.0, "m": 11},
    "lr": 1e-3,
    "batch_episodes": 8,
    "train_every": 4,
    "target_sync": 5,
    "replay_capacity": 100,
    "total_steps": 300,
    "eval_every": 150,
    "hidden": [16],
    "mixer": {"hidden_units": 2, "hypernet_hidden": 4},
}


def write_config(tmp_path, **overrides):
    obj = {"algorithm": "dvdn", "seed": 3, "train": dict(TINY_TRAIN)}
    obj.update(overrides)
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(obj))
    return path


class TestExperimentConfig:
    def test_empty_config_uses_defaults(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text("{}")
        game, config, out = cli.load_experiment(path)
        assert config.algo == "dqmix" and config.seed == 0
        assert config.support == SupportSpec(-10.0, 20.0, 51)
        assert game.payoff[(1, 0)].mean() == 3.0
        assert out is None

    def test_fields_parsed(self, tmp_path):
        path = write_config(tmp_path, out_dir="runs/x", seed=9)
        game, config, out = cli.load_experiment(path)
        assert config.algo == "dvdn" and config.seed == 9
        assert config.support.m == 11 and config.hidden == (16,)
        assert config.mixer.hidden_units == 2
        assert out == "runs/x"

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text(json.dumps({"algorithm": "dvdn", "extra": 1}))
        with pytest.raises(Exception):
            cli.load_experiment(path)
        path.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
        with pytest.raises(Exception):
            cli.load_experiment(path)

    def test_bad_algorithm_rejected(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text(json.dumps({"algorithm": "iql"}))
        with pytest.raises(Exception):
            cli.load_experiment(path)

    def test_inline_and_file_env(self, tmp_path):
        game_obj = envs.default_matrix_game().to_json_obj()
        inline = write_config(tmp_path, env=game_obj)
        game, _, _ = cli.load_experiment(inline)
        assert game.payoff[(0, 0)].mean() == 0.0

        (tmp_path / "game.json").write_text(json.dumps(game_obj))
        by_path = write_config(tmp_path, env="game.json")
        game2, _, _ = cli.load_experiment(by_path)
        assert game2.payoff == game.payoff


class TestCommands:
    def test_missing_config_fails_cleanly(self, capsys):
        rc = cli.main(["train", "--config", "/nonexistent/exp.json"])
        assert rc == 2
        assert "error" in capsys.readouterr().err

    def test_train_writes_artifacts(self, tmp_path, capsys):
        path = write_config(tmp_path)
        rc = cli.main(["train", "--config", str(path),
                       "--out", str(tmp_path / "run")])
        assert rc == 0
        for name in ("metrics.csv", "checkpoint.json", "final_eval.json"):
            assert (tmp_path / "run" / name).exists()

    def test_seed_override_changes_the_run(self, tmp_path):
        path = write_config(tmp_path)
        cli.main(["train", "--config", str(path), "--out", str(tmp_path / "a")])
        cli.main(["train", "--config", str(path), "--out", str(tmp_path / "b"),
                  "--seed", "77"])
        a = (tmp_path / "a" / "checkpoint.json").read_bytes()
        b = (tmp_path / "b" / "checkpoint.json").read_bytes()
        assert a != b

    def test_eval_report(self, tmp_path, capsys):
        path = write_config(tmp_path)
        cli.main(["train", "--config", str(path), "--out", str(tmp_path / "run")])
        capsys.readouterr()
        rc = cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.json"),
                       "--config", str(path)])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert set(payload["report"]) == {"0,0", "0,1", "1,0", "1,1"}
        hist = payload["histograms"]["1,1"]
        assert len(hist["atoms"]) == 11
        assert math.isclose(sum(hist["learned_probs"]), 1.0, abs_tol=1e-9)
        assert math.isclose(sum(hist["true_probs"]), 1.0, abs_tol=1e-9)

    def test_eval_deterministic(self, tmp_path, capsys):
        path = write_config(tmp_path)
        cli.main(["train", "--config", str(path), "--out", str(tmp_path / "run")])
        args = ["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.json"),
                "--config", str(path), "--out", str(tmp_path / "r1.json")]
        cli.main(args)
        args[-1] = str(tmp_path / "r2.json")
        cli.main(args)
        assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()

    def test_check_passes_and_corruption_fails(self, capsys):
        assert cli.main(["check", "oracle"]) == 0
        assert "PASS" in capsys.readouterr().out
        assert cli.main(["check", "distcore", "--corrupt-convolution"]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_sweep_atoms_csv(self, tmp_path, capsys):
        train = dict(TINY_TRAIN, total_steps=150, eval_every=150)
        path = write_config(tmp_path, train=train)
        rc = cli.main(["sweep-atoms", "--config", str(path), "--atoms", "5,7",
                       "--out", str(tmp_path / "sweep.csv")])
        assert rc == 0
        with open(tmp_path / "sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 4
        assert {r["m"] for r in rows} == {"5", "7"}
        assert all(float(r["kl"]) >= 0 for r in rows)
        assert all(float(r["kl_ref"]) >= 0 for r in rows)

    def test_demo_correlated(self, tmp_path, capsys):
        assert cli.main(["demo-correlated"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["kl_truth_vs_factored"] == pytest.approx(math.log(2))
        assert cli.main(["demo-correlated", "--out", str(tmp_path / "d.json")]) == 0
        saved = json.loads((tmp_path / "d.json").read_text())
        assert saved["factored_probs"] == [0.25, 0.5, 0.25]
