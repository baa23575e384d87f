import json
import os

import pytest

from s2ut_lab.cli import main


def run_cli(*args) -> int:
    return main(list(args))


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    data = tmp_path_factory.mktemp("cli-data")
    code = run_cli(
        "gen-data", "--out", str(data), "--seed", "3", "--n-semantic", "10",
        "--n-train", "32", "--n-dev", "4", "--n-test", "6", "--feat-dim", "6",
        "--sent-len-min", "2", "--sent-len-max", "4",
    )
    assert code == 0
    return data


@pytest.fixture(scope="module")
def tiny_run(tiny_data, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("cli-run")
    code = run_cli(
        "train", "--data", str(tiny_data), "--out", str(run_dir),
        "--variant", "s2ut", "--seed", "1", "--steps", "12", "--warmup-steps", "4",
        "--log-every", "4", "--checkpoint-every", "0", "--n-future", "2",
    )
    assert code == 0
    return run_dir


class TestUsage:
    def test_no_arguments_prints_usage_nonzero(self, capsys):
        assert run_cli() != 0
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand_nonzero(self):
        assert run_cli("frobnicate") != 0

    def test_unknown_flag_nonzero(self):
        assert run_cli("gen-data", "--volume", "11") != 0


class TestGenData:
    def test_writes_all_artifacts(self, tiny_data):
        for name in ("train.jsonl", "dev.jsonl", "test.jsonl", "task.kv", "manifest.json"):
            assert (tiny_data / name).exists(), name

    def test_idempotent_bytes(self, tiny_data, tmp_path):
        again = tmp_path / "again"
        run_cli("gen-data", "--out", str(again), "--seed", "3", "--n-semantic", "10",
                "--n-train", "32", "--n-dev", "4", "--n-test", "6", "--feat-dim", "6",
                "--sent-len-min", "2", "--sent-len-max", "4")
        assert (again / "train.jsonl").read_bytes() == (tiny_data / "train.jsonl").read_bytes()

    def test_manifest_digests_match_disk(self, tiny_data):
        import hashlib

        manifest = json.loads((tiny_data / "manifest.json").read_text())
        digest = hashlib.sha256((tiny_data / "task.kv").read_bytes()).hexdigest()
        assert manifest["config_digests"]["task.kv"] == digest


class TestTrainEvalAnalyze:
    def test_train_writes_everything(self, tiny_run):
        for name in ("ckpt_final.bin", "train_log.csv", "model.kv", "train.kv",
                     "weights.kv", "task.kv", "manifest.json"):
            assert (tiny_run / name).exists(), name

    def test_eval_then_analyze(self, tiny_data, tiny_run):
        assert run_cli("eval", "--data", str(tiny_data), "--run", str(tiny_run),
                       "--split", "test", "--beams", "1,5") == 0
        for name in ("dump_greedy.jsonl", "dump_beam5.jsonl", "eval_bleu.csv"):
            assert (tiny_run / name).exists(), name
        rows = (tiny_run / "eval_bleu.csv").read_text().strip().splitlines()
        assert rows[0] == "mode,bleu,n_samples"
        assert len(rows) == 3
        assert run_cli("analyze", "--run", str(tiny_run)) == 0
        for name in ("shift_report.csv", "shift_summary.csv", "entropy_hist.csv"):
            assert (tiny_run / name).exists(), name

    def test_missing_data_dir_fails_cleanly(self, tmp_path):
        assert run_cli("train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")) == 1

    def test_report_from_explicit_runs(self, tiny_data, tiny_run, tmp_path):
        run_cli("eval", "--data", str(tiny_data), "--run", str(tiny_run), "--beams", "1,5,10")
        out = tmp_path / "report"
        code = run_cli("report", "--data", str(tiny_data), "--out", str(out),
                       "--run", f"s2ut,1,{tiny_run}")
        assert code == 0
        assert (out / "comparison.csv").exists()
        assert (out / "bleu_bars.svg").exists()

    def test_report_without_runs_is_usage_error(self, tiny_data, tmp_path):
        assert run_cli("report", "--data", str(tiny_data), "--out", str(tmp_path / "r")) == 2


class TestGradCheckCommand:
    def test_single_seed_suite_passes(self, capsys):
        assert run_cli("grad-check", "--seeds", "1", "--max-coords", "4") == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out


@pytest.mark.slow
class TestRunMatrix:
    def test_small_matrix_end_to_end(self, tiny_data, tmp_path):
        out = tmp_path / "matrix"
        code = run_cli(
            "run-matrix", "--data", str(tiny_data), "--out", str(out),
            "--variants", "none,s2ut", "--seeds", "1", "--steps", "12",
            "--warmup-steps", "4", "--n-future", "2", "--jobs", "1",
        )
        assert code == 0
        comparison = (out / "report" / "comparison.csv").read_text().strip().splitlines()
        assert comparison[0] == "variant,seed,greedy,beam5,beam10"
        assert len(comparison) == 3  # header + 2 runs
        for run_name in ("none-s1", "s2ut-s1"):
            assert (out / "runs" / run_name / "ckpt_final.bin").exists()
