"""Config parsing, the end-to-end runner, report comparison and the CLI."""

import json
from pathlib import Path

import numpy as np
import pytest

from metamtl import cli, runner
from metamtl.config import ExperimentConfig, load_config, save_config
from metamtl.data import save_dset, synth_blobs
from metamtl.errors import ComparisonError, ParameterError

CONFIG_TEXT = """
[experiment]
name = smoke
regime = meta_mtl
arch = toy_dense
hidden = 12
seed = 9
out_dir = {out}

[data]
kind = blobs
blobs_k = 3
blobs_per_cluster = 30
blobs_d = 6
blobs_spread = 0.8
test_fraction = 0.3

[tasks]
count = 2
k = 3
transform = random_scaling

[autoencoder]
latent_dim = 4
epochs = 4
batch_size = 16
learning_rate = 0.1

[train]
alpha = 0.2
beta = 0.2
episodes = 30
batch_size = 16
tasks_per_episode = 2
meta_order = 2
"""


def _write_config(tmp_path, text=None) -> Path:
    path = tmp_path / "exp.cfg"
    path.write_text((text or CONFIG_TEXT).format(out=tmp_path / "runs"))
    return path


class TestConfig:
    def test_parse_round_trip(self, tmp_path):
        cfg = load_config(_write_config(tmp_path))
        assert cfg.regime == "meta_mtl"
        assert cfg.task_count == 2
        assert cfg.ae_epochs == 4
        assert cfg.blobs_k == 3
        out = tmp_path / "resolved.cfg"
        save_config(out, cfg)
        assert load_config(out) == cfg

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[experiment]\nturbo = yes\n")
        with pytest.raises(ParameterError, match="turbo"):
            load_config(path)

    def test_unknown_regime_rejected(self):
        with pytest.raises(ParameterError):
            ExperimentConfig(regime="distillation")


class TestRunner:
    def test_stl_on_blobs_report(self, tmp_path):
        cfg = ExperimentConfig(regime="stl", data_kind="blobs", blobs_k=3,
                               blobs_per_cluster=30, blobs_d=6, blobs_spread=0.8,
                               arch="toy_dense", hidden=12, alpha=0.3,
                               episodes=80, batch_size=16, seed=4,
                               out_dir=str(tmp_path / "runs"))
        report = runner.run(cfg)
        assert report.metrics["partition_nmi"] == []
        assert 0.0 <= report.metrics["test_accuracy"] <= 1.0
        assert report.metrics["train_accuracy"] > 0.8
        saved = json.loads(Path(report.run_dir, "report.json").read_text())
        assert saved["seed"] == 4

    def test_meta_run_emits_partitions_and_nmi(self, tmp_path):
        cfg = load_config(_write_config(tmp_path))
        report = runner.run(cfg)
        assert len(report.metrics["partition_nmi"]) == 2
        run_dir = Path(report.run_dir)
        assert (run_dir / "partition_0.txt").exists()
        assert (run_dir / "embeddings.emb1").exists()
        assert (run_dir / "checkpoint.mmtl").exists()

    def test_random_label_regime(self, tmp_path):
        cfg = ExperimentConfig(regime="mtl_random_labels", data_kind="blobs",
                               blobs_k=3, blobs_per_cluster=30, blobs_d=6,
                               arch="toy_dense", hidden=12, alpha=0.2,
                               episodes=30, batch_size=16, task_count=2, k=3,
                               seed=4, out_dir=str(tmp_path / "runs"))
        report = runner.run(cfg)
        assert len(report.metrics["partition_nmi"]) == 2
        # random labels carry almost no information about the real ones
        assert max(report.metrics["partition_nmi"]) < 0.2

    def test_byte_identical_reruns(self, tmp_path):
        cfg = load_config(_write_config(tmp_path))
        a = runner.run(cfg)
        b = runner.run(cfg)
        assert a.run_dir != b.run_dir
        csv_a = Path(a.artifacts["metrics_csv"]).read_bytes()
        csv_b = Path(b.artifacts["metrics_csv"]).read_bytes()
        assert csv_a == csv_b
        ck_a = Path(a.artifacts["checkpoint"]).read_bytes()
        ck_b = Path(b.artifacts["checkpoint"]).read_bytes()
        assert ck_a == ck_b

    def test_run_dirs_never_overwrite(self, tmp_path):
        cfg = ExperimentConfig(regime="stl", data_kind="blobs", blobs_k=2,
                               blobs_per_cluster=20, blobs_d=4, arch="toy_dense",
                               hidden=8, alpha=0.3, episodes=10, batch_size=8,
                               seed=1, out_dir=str(tmp_path / "runs"))
        a = runner.run(cfg)
        b = runner.run(cfg)
        assert Path(a.run_dir).name == "run-0001"
        assert Path(b.run_dir).name == "run-0002"

    def test_stage_error_names_stage(self, tmp_path):
        cfg = ExperimentConfig(regime="stl", data_kind="idx",
                               train_images="/nonexistent/a",
                               train_labels="/nonexistent/b",
                               test_images="/nonexistent/c",
                               test_labels="/nonexistent/d",
                               out_dir=str(tmp_path / "runs"))
        with pytest.raises(runner.StageError, match="load data"):
            runner.run(cfg)


class TestCompare:
    def _run_pair(self, tmp_path, seed_b=9):
        cfg = load_config(_write_config(tmp_path))
        cfg.episodes = 10
        a = runner.run(cfg)
        cfg2 = load_config(_write_config(tmp_path))
        cfg2.episodes = 10
        cfg2.seed = seed_b
        b = runner.run(cfg2)
        return a, b

    def test_compare_self_all_zero(self, tmp_path):
        a, _ = self._run_pair(tmp_path)
        rows = runner.compare(a, a)
        assert rows and all(delta == 0.0 for _, _, _, delta in rows)

    def test_mismatched_seed_rejected(self, tmp_path):
        a, b = self._run_pair(tmp_path, seed_b=10)
        with pytest.raises(ComparisonError):
            runner.compare(a, b)


class TestProbe:
    def test_distances(self, tmp_path):
        data, _ = synth_blobs(3, 20, 6, 0.8, seed=0)
        dset = tmp_path / "blobs.dset"
        save_dset(dset, data)

        cfg = ExperimentConfig(regime="stl", data_kind="dset",
                               train_path=str(dset), arch="toy_dense", hidden=8,
                               alpha=0.3, episodes=30, batch_size=16, seed=2,
                               out_dir=str(tmp_path / "r1"))
        rep_a = runner.run(cfg)
        cfg.out_dir = str(tmp_path / "r2")
        cfg.episodes = 5
        rep_b = runner.run(cfg)

        pairs = tmp_path / "pairs.csv"
        pairs.write_text("i,j\n0,0\n0,1\n2,5\n")
        rows = runner.probe(rep_a.artifacts["checkpoint"],
                            rep_b.artifacts["checkpoint"], pairs, data)
        assert rows[0][2] == 0.0 and rows[0][3] == 0.0  # identical pair
        assert all(r[2] >= 0 and r[3] >= 0 for r in rows)

        same = runner.probe(rep_a.artifacts["checkpoint"],
                            rep_a.artifacts["checkpoint"], pairs, data)
        assert all(da == db for _, _, da, db in same)

    def test_out_of_range_pair(self, tmp_path):
        data, _ = synth_blobs(2, 5, 4, 0.5, seed=0)
        dset = tmp_path / "b.dset"
        save_dset(dset, data)
        cfg = ExperimentConfig(regime="stl", data_kind="dset", train_path=str(dset),
                               arch="toy_dense", hidden=8, alpha=0.3, episodes=5,
                               batch_size=4, seed=2, out_dir=str(tmp_path / "rr"))
        rep = runner.run(cfg)
        pairs = tmp_path / "pairs.csv"
        pairs.write_text("0,999\n")
        with pytest.raises(Exception, match="out of range"):
            runner.probe(rep.artifacts["checkpoint"], rep.artifacts["checkpoint"],
                         pairs, data)


class TestCli:
    def test_run_command(self, tmp_path, capsys):
        path = _write_config(tmp_path)
        code = cli.main(["run", "--config", str(path), "--seed", "3",
                         "--out", str(tmp_path / "cli-runs")])
        assert code == 0
        out = capsys.readouterr().out
        assert "test_accuracy" in out
        report = json.loads((tmp_path / "cli-runs" / "run-0001" / "report.json")
                            .read_text())
        assert report["seed"] == 3

    def test_compare_command(self, tmp_path, capsys):
        path = _write_config(tmp_path)
        assert cli.main(["run", "--config", str(path),
                         "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["run", "--config", str(path),
                         "--out", str(tmp_path / "b")]) == 0
        code = cli.main(["compare",
                         "--a", str(tmp_path / "a" / "run-0001" / "report.json"),
                         "--b", str(tmp_path / "b" / "run-0001" / "report.json")])
        assert code == 0
        assert "delta" in capsys.readouterr().out

    def test_probe_command(self, tmp_path, capsys):
        # the probe dataset only has to match the checkpoint's input shape
        data, _ = synth_blobs(3, 20, 6, 0.8, seed=0)
        dset = tmp_path / "blobs.dset"
        save_dset(dset, data)
        cfg_path = _write_config(tmp_path)
        assert cli.main(["run", "--config", str(cfg_path),
                         "--out", str(tmp_path / "p1")]) == 0
        ck = str(tmp_path / "p1" / "run-0001" / "checkpoint.mmtl")
        pairs = tmp_path / "pairs.csv"
        pairs.write_text("0,1\n")
        out_csv = tmp_path / "probe.csv"
        code = cli.main(["probe", "--a", ck, "--b", ck, "--pairs", str(pairs),
                         "--data", str(dset), "--out", str(out_csv)])
        assert code == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "i,j,dist_a,dist_b"
        assert len(lines) == 2

    def test_error_exit_code(self, tmp_path, capsys):
        code = cli.main(["run", "--config", str(tmp_path / "missing.cfg")])
        assert code == 1
        assert "error" in capsys.readouterr().err
