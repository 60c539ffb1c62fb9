"""End-to-end command-line contract: exit codes, artifacts, idempotence.

A module-scoped workspace runs the full tiny pipeline once (gen-data,
train-vae, train-ldm, train-baseline); individual tests inspect its outputs
or exercise error paths against it.
"""
import json

import numpy as np
import pytest

from discrete_policy.autodiff import NonFiniteError
from discrete_policy.cli import main

TINY_CONFIG = {
    "seed": 3,
    "n_tasks": 2,
    "demos_per_task": 3,
    "horizon": 8,
    "n_exec": 4,
    "codebook": {"num_tokens": 2, "code_dim": 16, "num_codes": 32},
    "network": {"hidden_dim": 16, "num_heads": 2, "ff_dim": 32,
                "enc_layers": 1, "dec_layers": 1, "slot_embed_dim": 4},
    "diffusion": {"num_steps": 10, "sample_steps": 5, "hidden_dim": 32,
                  "num_blocks": 2, "time_embed_dim": 8},
    "optimizer": {"batch_stage1": 4, "batch_stage2": 4, "batch_baseline": 4},
    "training": {"stage1_steps": 6, "stage2_steps": 6, "baseline_steps": 6,
                 "log_every": 2, "latent_stride": 4},
    "eval": {"n_episodes": 2, "max_steps": 8},
}


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    paths = {
        "cfg": cfg,
        "data": root / "data",
        "vae": root / "vae",
        "policy": root / "policy",
        "baseline": root / "baseline",
        "root": root,
    }
    base = ["--config", str(cfg)]
    assert main(["gen-data", *base, "--out", str(paths["data"])]) == 0
    assert main(["train-vae", *base, "--data", str(paths["data"]),
                 "--out", str(paths["vae"])]) == 0
    assert main(["train-ldm", *base, "--data", str(paths["data"]),
                 "--vae", str(paths["vae"]), "--out", str(paths["policy"])]) == 0
    assert main(["train-baseline", *base, "--data", str(paths["data"]),
                 "--out", str(paths["baseline"])]) == 0
    return paths


class TestConfigErrors:
    def test_missing_config_file(self, tmp_path):
        rc = main(["gen-data", "--config", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "d")])
        assert rc == 2

    def test_unknown_key_rejected(self, tmp_path):
        rc = main(["gen-data", "--set", "not_a_field=1",
                   "--out", str(tmp_path / "d")])
        assert rc == 2

    def test_bad_value_rejected(self, tmp_path):
        rc = main(["gen-data", "--set", "n_tasks=99", "--out", str(tmp_path / "d")])
        assert rc == 2

    def test_invalid_json_config(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{oops")
        rc = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")])
        assert rc == 2


class TestGenData:
    def test_manifest_lines_match_demo_count(self, ws):
        lines = (ws["data"] / "manifest.jsonl").read_text().strip().split("\n")
        assert len(lines) == 6
        meta = json.loads((ws["data"] / "meta.json").read_text())
        assert meta["num_demos"] == 6

    def test_prints_per_task_counts(self, ws, tmp_path, capsys):
        rc = main(["gen-data", "--config", str(ws["cfg"]),
                   "--out", str(tmp_path / "d2")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "task 0" in out and "task 1" in out

    def test_rerun_is_byte_identical(self, ws, tmp_path):
        out2 = tmp_path / "again"
        assert main(["gen-data", "--config", str(ws["cfg"]), "--out", str(out2)]) == 0
        for name in ("meta.json", "manifest.jsonl", "data.bin"):
            assert (out2 / name).read_bytes() == (ws["data"] / name).read_bytes()


class TestTraining:
    def test_vae_checkpoint_written(self, ws):
        manifest = json.loads((ws["vae"] / "manifest.json").read_text())
        assert manifest["kind"] == "vae"
        assert (ws["vae"] / "tensors.bin").exists()
        assert (ws["vae"] / "loss_curve.png").exists()

    def test_metrics_line_count_matches_log_interval(self, ws):
        for stage in ("vae", "policy", "baseline"):
            lines = (ws[stage] / "metrics.jsonl").read_text().strip().split("\n")
            assert len(lines) == 3  # 6 steps / log_every 2
            for line in lines:
                entry = json.loads(line)
                assert "step" in entry

    def test_ldm_kind_is_policy(self, ws):
        manifest = json.loads((ws["policy"] / "manifest.json").read_text())
        assert manifest["kind"] == "policy"

    def test_ldm_without_vae_checkpoint(self, ws, tmp_path):
        rc = main(["train-ldm", "--config", str(ws["cfg"]),
                   "--data", str(ws["data"]),
                   "--vae", str(tmp_path / "missing"),
                   "--out", str(tmp_path / "out")])
        assert rc == 4

    def test_train_on_missing_dataset(self, ws, tmp_path):
        rc = main(["train-vae", "--config", str(ws["cfg"]),
                   "--data", str(tmp_path / "missing"),
                   "--out", str(tmp_path / "out")])
        assert rc == 4

    def test_rerun_is_byte_identical(self, ws, tmp_path):
        out2 = tmp_path / "vae2"
        rc = main(["train-vae", "--config", str(ws["cfg"]),
                   "--data", str(ws["data"]), "--out", str(out2)])
        assert rc == 0
        for name in ("manifest.json", "tensors.bin", "metrics.jsonl", "loss_curve.png"):
            assert (out2 / name).read_bytes() == (ws["vae"] / name).read_bytes()

    def test_numerical_failure_exit_code(self, ws, tmp_path, monkeypatch):
        def explode(*args, **kwargs):
            err = NonFiniteError("matmul", 40)
            err.last_good_step = 3
            raise err

        monkeypatch.setattr("discrete_policy.train.train_stage1", explode)
        rc = main(["train-vae", "--config", str(ws["cfg"]),
                   "--data", str(ws["data"]), "--out", str(tmp_path / "out")])
        assert rc == 5


class TestEval:
    def test_report_contents(self, ws, tmp_path):
        out = tmp_path / "report"
        rc = main(["eval", "--config", str(ws["cfg"]),
                   "--checkpoint", str(ws["policy"]), "--out", str(out)])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert set(report["per_task"]) == {"T0", "T1"}
        for entry in report["per_task"].values():
            assert 0.0 <= entry["success_rate"] <= 1.0
            assert sum(entry["modes"].values()) == 2  # both tiny tasks have obstacles
        assert 0.0 <= report["average_success"] <= 1.0
        assert report["episodes_per_task"] == 2
        assert report["code_perplexity"] >= 1.0
        assert (out / "report.csv").exists()
        assert (out / "success_rates.png").exists()

    def test_fixed_seed_identical_report(self, ws, tmp_path):
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert main(["eval", "--config", str(ws["cfg"]),
                         "--checkpoint", str(ws["policy"]), "--out", str(out)]) == 0
        assert (outs[0] / "report.json").read_bytes() == \
            (outs[1] / "report.json").read_bytes()

    def test_baseline_has_no_perplexity(self, ws, tmp_path):
        out = tmp_path / "report"
        rc = main(["eval", "--config", str(ws["cfg"]),
                   "--checkpoint", str(ws["baseline"]), "--out", str(out)])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["code_perplexity"] is None

    def test_missing_checkpoint(self, ws, tmp_path):
        rc = main(["eval", "--config", str(ws["cfg"]),
                   "--checkpoint", str(tmp_path / "missing"),
                   "--out", str(tmp_path / "r")])
        assert rc == 4

    def test_episode_override(self, ws, tmp_path):
        out = tmp_path / "report"
        rc = main(["eval", "--config", str(ws["cfg"]),
                   "--checkpoint", str(ws["policy"]), "--out", str(out),
                   "--episodes", "1"])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["episodes_per_task"] == 1


class TestExport:
    def test_row_count_and_header(self, ws, tmp_path):
        from discrete_policy.bench import load_dataset

        out = tmp_path / "latents.csv"
        rc = main(["export", "--config", str(ws["cfg"]),
                   "--checkpoint", str(ws["vae"]), "--data", str(ws["data"]),
                   "--out", str(out)])
        assert rc == 0
        demos = load_dataset(ws["data"])
        expected = sum(len(range(0, d.length, 8)) for d in demos)
        lines = out.read_text().strip().split("\n")
        assert len(lines) == expected + 1
        header = lines[0].split(",")
        assert len(header) == 1 + 2 + 2 * 16

    def test_pca2_flag(self, ws, tmp_path):
        out = tmp_path / "latents.csv"
        rc = main(["export", "--config", str(ws["cfg"]),
                   "--checkpoint", str(ws["vae"]), "--data", str(ws["data"]),
                   "--out", str(out), "--pca2"])
        assert rc == 0
        header = out.read_text().split("\n")[0].split(",")
        assert header[-2:] == ["pca_x", "pca_y"]
        assert out.with_suffix(".png").exists()

    def test_policy_checkpoint_also_exports(self, ws, tmp_path):
        out = tmp_path / "latents.csv"
        rc = main(["export", "--config", str(ws["cfg"]),
                   "--checkpoint", str(ws["policy"]), "--data", str(ws["data"]),
                   "--out", str(out)])
        assert rc == 0

    def test_baseline_checkpoint_rejected(self, ws, tmp_path):
        rc = main(["export", "--config", str(ws["cfg"]),
                   "--checkpoint", str(ws["baseline"]), "--data", str(ws["data"]),
                   "--out", str(tmp_path / "x.csv")])
        assert rc == 4

    def test_missing_checkpoint(self, ws, tmp_path):
        rc = main(["export", "--config", str(ws["cfg"]),
                   "--checkpoint", str(tmp_path / "missing"),
                   "--data", str(ws["data"]), "--out", str(tmp_path / "x.csv")])
        assert rc == 4


class TestThreadEnv:
    def test_thread_count_propagates(self, monkeypatch):
        from discrete_policy.cli import THREADS_ENV, _pin_threads

        monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
        monkeypatch.setenv(THREADS_ENV, "3")
        _pin_threads()
        import os

        assert os.environ["OMP_NUM_THREADS"] == "3"
