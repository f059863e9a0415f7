import json
import subprocess
import sys

import numpy as np
import pytest

from feater.cli import main, read_csv_channel, run
from feater.core.rng import RngStream
from feater.core.serial import write_tensor
from feater.costmodel import macs_feater_block, macs_vanilla_block

TINY_CONFIG = {"steps": 3, "n": 2, "h": 8, "w": 8, "depth": 1, "batch_size": 1, "eval_size": 2, "seed": 4}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


class TestCost:
    def test_feater(self, tmp_path):
        out = tmp_path / "cost.json"
        res = run(["cost", "--arch", "feater", "--n", "32", "--height", "64", "--width", "64", "--out", str(out)])
        assert res.exit_code == 0 and res.artifacts == [str(out)]
        data = json.loads(out.read_text())
        assert data["total_macs"] == 88_080_384
        assert data["per_block"] == macs_feater_block(32, 64, 64).to_dict()

    def test_vanilla(self):
        res = run(["cost", "--arch", "vanilla", "--n", "32", "--dim", "4096"])
        assert json.loads(res.summary)["total_macs"] == 4_303_355_904

    def test_depth(self):
        res = run(["cost", "--arch", "feater", "--n", "4", "--height", "8", "--width", "8", "--depth", "8"])
        data = json.loads(res.summary)
        assert data["total_macs"] == 8 * macs_feater_block(4, 8, 8).total_macs

    @pytest.mark.parametrize("n,d", [(2, 64), (7, 100), (32, 1024)])
    def test_matches_model(self, n, d):
        res = run(["cost", "--arch", "vanilla", "--n", str(n), "--dim", str(d)])
        assert json.loads(res.summary)["per_block"] == macs_vanilla_block(n, d).to_dict()

    def test_pretty(self):
        res = run(["cost", "--arch", "feater", "--n", "32", "--height", "64", "--width", "64", "--pretty"])
        assert "88,080,384" in res.summary

    def test_time(self):
        res = run(["cost", "--arch", "feater", "--n", "2", "--height", "4", "--width", "4", "--time"])
        assert json.loads(res.summary)["forward_seconds"] >= 0

    def test_missing_extent(self):
        assert run(["cost", "--arch", "feater", "--n", "32"]).exit_code == 2

    def test_zero_extent(self):
        assert run(["cost", "--arch", "vanilla", "--n", "0", "--dim", "4"]).exit_code == 2


class TestUsage:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 2
        err = capsys.readouterr().err
        assert "usage" in err

    def test_unknown_flag(self):
        assert run(["cost", "--arch", "feater", "--bogus"]).exit_code == 2

    def test_invalid_number(self):
        assert run(["cost", "--arch", "vanilla", "--n", "three", "--dim", "4"]).exit_code == 2

    def test_missing_config_file(self, tmp_path):
        assert run(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]).exit_code == 1

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "feater", "frobnicate"], capture_output=True, text=True)
        assert proc.returncode == 2 and "usage" in proc.stderr


class TestGradcheck:
    @pytest.mark.parametrize("arch", ["feater", "vanilla"])
    def test_passes(self, arch):
        res = run(["gradcheck", "--seed", "1", "--arch", arch, "--n", "3", "--height", "4", "--width", "4"])
        data = json.loads(res.summary)
        assert res.exit_code == 0 and data["passed"] and data["worst"] < 1e-5

    def test_bad_eps(self):
        assert run(["gradcheck", "--arch", "feater", "--n", "2", "--height", "4", "--width", "4", "--eps", "0"]).exit_code == 2


class TestTrain:
    def test_artifacts(self, tmp_path, config_file):
        out = tmp_path / "run"
        res = run(["train", "--config", str(config_file), "--out", str(out)])
        assert res.exit_code == 0
        lines = (out / "record.jsonl").read_text().splitlines()
        assert len(lines) == TINY_CONFIG["steps"] + 1
        manifest = json.loads((out / "checkpoint" / "manifest.json").read_text())
        assert manifest["blocks"][0]["tensors"]["w_qw"] == "block0.w_qw.ftr"
        assert (out / "checkpoint" / "block0.w_qw.ftr").exists()
        assert (out / "checkpoint" / "recon" / "manifest.json").exists()

    def test_deterministic(self, tmp_path, config_file):
        run(["train", "--config", str(config_file), "--out", str(tmp_path / "a")])
        run(["train", "--config", str(config_file), "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "record.jsonl").read_text() == (tmp_path / "b" / "record.jsonl").read_text()

    def test_seed_env_override(self, tmp_path, config_file, monkeypatch):
        run(["train", "--config", str(config_file), "--out", str(tmp_path / "a")])
        monkeypatch.setenv("FEATER_SEED", "99")
        run(["train", "--config", str(config_file), "--out", str(tmp_path / "b")])
        summary = json.loads((tmp_path / "b" / "summary.json").read_text())
        assert summary["config"]["seed"] == 99
        assert (tmp_path / "a" / "record.jsonl").read_text() != (tmp_path / "b" / "record.jsonl").read_text()

    def test_bad_seed_env(self, tmp_path, config_file, monkeypatch):
        monkeypatch.setenv("FEATER_SEED", "0x10")
        assert run(["train", "--config", str(config_file), "--out", str(tmp_path)]).exit_code == 2

    def test_bad_config_value(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"steps": -3}))
        assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]).exit_code == 2


class TestAblate:
    def test_csv(self, tmp_path, config_file):
        out = tmp_path / "sweep.csv"
        res = run(["ablate", "--ratios", "0.5,0.0", "--config", str(config_file), "--out", str(out)])
        assert res.exit_code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "ratio,decode_err_px,recon_loss"
        assert [float(l.split(",")[0]) for l in lines[1:]] == [0.0, 0.5]

    def test_bad_ratio_list(self, tmp_path, config_file):
        assert run(["ablate", "--ratios", "a,b", "--config", str(config_file), "--out", str(tmp_path / "x")]).exit_code == 2

    def test_bad_jobs(self, tmp_path, config_file):
        assert run(["ablate", "--ratios", "0.1", "--config", str(config_file), "--out", str(tmp_path / "x"), "--jobs", "0"]).exit_code == 2


class TestDump:
    def test_csv_round_trip(self, tmp_path):
        x = RngStream(0).normal((3, 4, 5)) * 1e3
        write_tensor(tmp_path / "x.ftr", x)
        res = run(["dump", "--input", str(tmp_path / "x.ftr"), "--format", "csv", "--out", str(tmp_path / "d")])
        assert res.exit_code == 0 and len(res.artifacts) == 3
        for i in range(3):
            back = read_csv_channel(tmp_path / "d" / f"channel{i:03d}.csv")
            assert back.shape == (4, 5)
            np.testing.assert_allclose(back, x[i], rtol=1e-12)

    def test_pgm(self, tmp_path):
        x = np.stack([np.arange(6.0).reshape(2, 3), np.full((2, 3), 7.0)])
        write_tensor(tmp_path / "x.ftr", x)
        run(["dump", "--input", str(tmp_path / "x.ftr"), "--format", "pgm", "--out", str(tmp_path / "d")])
        blob = (tmp_path / "d" / "channel000.pgm").read_bytes()
        assert blob.startswith(b"P5\n3 2\n255\n")
        assert list(blob[-6:]) == [0, 51, 102, 153, 204, 255]
        assert list((tmp_path / "d" / "channel001.pgm").read_bytes()[-6:]) == [0] * 6

    def test_missing_input(self, tmp_path):
        assert run(["dump", "--input", str(tmp_path / "none.ftr"), "--out", str(tmp_path / "d")]).exit_code == 1

    def test_not_a_stack(self, tmp_path):
        write_tensor(tmp_path / "x.ftr", np.ones(4))
        assert run(["dump", "--input", str(tmp_path / "x.ftr"), "--out", str(tmp_path / "d")]).exit_code == 2
