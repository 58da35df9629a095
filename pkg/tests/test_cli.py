"""CLI behavior: determinism, config handling, error contract, resumability."""

import json

import pytest

from flowstyle import synthworld as sw
from flowstyle.cli import main, parse_config_file, RunConfig, CliError


def run_cli(args):
    return main(args)


class TestConfigParsing:
    def test_key_value_with_comments(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment\npreserved = 4\nshifted=2  # trailing\n\n")
        values = parse_config_file(cfg)
        assert values == {"preserved": "4", "shifted": "2"}

    def test_malformed_line_rejected(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("this is not a kv line\n")
        with pytest.raises(CliError):
            parse_config_file(cfg)

    def test_unknown_keys_rejected(self):
        with pytest.raises(CliError):
            RunConfig({"nope": "1"}, known={"preserved"})


class TestBuildData:
    def test_same_seed_identical_manifests(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("preserved = 5\nshifted = 5\n")
        assert run_cli(["build-data", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "a")]) == 0
        out_a = capsys.readouterr().out
        assert run_cli(["build-data", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "b")]) == 0
        out_b = capsys.readouterr().out
        assert out_a.split("sha256=")[1] == out_b.split("sha256=")[1]
        assert (tmp_path / "a" / "config.json").exists()
        assert len(sw.load_manifest(tmp_path / "a" / "manifest.jsonl")) == 10

    def test_unknown_config_key_fails_cleanly(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("bogus_key = 1\n")
        rc = run_cli(["build-data", "--config", str(cfg), "--out", str(tmp_path / "x")])
        assert rc != 0
        err = capsys.readouterr().err
        assert err.startswith("error code=") and "\n" == err[-1] and err.count("\n") == 1


class TestRunRootEnv:
    def test_relative_out_lands_under_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FLOWSTYLE_RUN_ROOT", str(tmp_path / "root"))
        cfg = tmp_path / "c.cfg"
        cfg.write_text("preserved = 2\nshifted = 0\n")
        assert run_cli(["build-data", "--config", str(cfg), "--out", "runs/data"]) == 0
        assert (tmp_path / "root" / "runs" / "data" / "manifest.jsonl").exists()


class TestStageCommands:
    def test_stage1_runs_and_is_idempotent(self, tmp_path, warmup_dir, dataset_dir, capsys):
        cfg = tmp_path / "s1.cfg"
        cfg.write_text(
            f"manifest = {dataset_dir / 'manifest.jsonl'}\n"
            f"warmups = {warmup_dir}\n"
            "batch_size = 4\n"
            "srl_T_steps = 3\n"
            "srl_t_end = 1\n"
        )
        out = tmp_path / "run1"
        assert run_cli(["train-stage1", "--config", str(cfg), "--steps", "6", "--out", str(out)]) == 0
        assert (out / "checkpoint.pt").exists()
        assert (out / "config.json").exists()
        lines = (out / "steps.jsonl").read_text().splitlines()
        assert len(lines) == 6
        capsys.readouterr()
        # rerun: complete run is a no-op
        assert run_cli(["train-stage1", "--config", str(cfg), "--steps", "6", "--out", str(out)]) == 0
        assert "already complete" in capsys.readouterr().out

    def test_stage2_after_stage1(self, tmp_path, warmup_dir, dataset_dir):
        cfg1 = tmp_path / "s1.cfg"
        cfg1.write_text(
            f"manifest = {dataset_dir / 'manifest.jsonl'}\nwarmups = {warmup_dir}\n"
            "batch_size = 4\nsrl_T_steps = 3\nsrl_t_end = 1\n"
        )
        out1 = tmp_path / "run1"
        assert run_cli(["train-stage1", "--config", str(cfg1), "--steps", "4", "--out", str(out1)]) == 0
        cfg2 = tmp_path / "s2.cfg"
        cfg2.write_text(
            f"manifest = {dataset_dir / 'manifest.jsonl'}\n"
            f"init = {out1 / 'checkpoint.pt'}\n"
            "batch_size = 4\nsrl_T_steps = 3\nsrl_t_end = 1\n"
        )
        out2 = tmp_path / "run2"
        assert run_cli(["train-stage2", "--config", str(cfg2), "--steps", "4", "--out", str(out2)]) == 0
        assert (out2 / "checkpoint.pt").exists()

    def test_missing_artifact_error(self, tmp_path, capsys):
        cfg = tmp_path / "s1.cfg"
        cfg.write_text("manifest = /nonexistent/manifest.jsonl\nwarmups = /nonexistent\n")
        rc = run_cli(["train-stage1", "--config", str(cfg), "--steps", "2", "--out", str(tmp_path / "r")])
        assert rc != 0
        assert capsys.readouterr().err.startswith("error code=")


class TestBenchAndReport:
    def test_bench_on_warm_model_and_report(self, tmp_path, warmup_dir, capsys):
        cfg = tmp_path / "b.cfg"
        cfg.write_text(
            f"checkpoint = {warmup_dir / 'base.pt'}\n"
            f"classifier = {warmup_dir / 'classifier.pt'}\n"
            "bench_contents = 2\nbench_styles = 2\nbench_samples = 1\ntask = style\n"
        )
        out = tmp_path / "bench"
        assert run_cli(["bench", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "bench_report.json").exists()
        assert (out / "bench_report.csv").exists()
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert "style_style_sim" in summary

        m1 = tmp_path / "m1"
        m1.mkdir()
        (m1 / "metrics.json").write_text(json.dumps({"variant": "full", "seed": 0, "style_metric": 0.4}))
        m2 = tmp_path / "m2"
        m2.mkdir()
        (m2 / "metrics.json").write_text(json.dumps({"variant": "no_srl", "seed": 0, "style_metric": 0.3}))
        assert run_cli(["report", "--runs", f"{m1},{m2}", "--out", str(tmp_path / "rep")]) == 0
        assert (tmp_path / "rep" / "report.csv").exists()

    def test_report_missing_metrics_fails(self, tmp_path, capsys):
        rc = run_cli(["report", "--runs", str(tmp_path / "none"), "--out", str(tmp_path / "rep")])
        assert rc != 0
        assert "error code=missing-metrics" in capsys.readouterr().err
