"""Command-line behavior: exit codes, formats, files, and resumption."""

from __future__ import annotations

import json
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from arise import reference_spec
from arise.cli import main

from conftest import backend_config_dict


@pytest.fixture()
def runner() -> CliRunner:
    return CliRunner()


def all_text(result) -> str:
    """stdout plus stderr, across click versions that split or mix them."""
    try:
        return result.output + result.stderr
    except (ValueError, AttributeError):
        return result.output


@pytest.fixture()
def spec_file(tmp_path: Path) -> Path:
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(reference_spec().to_dict()))
    return path


def do_run(runner: CliRunner, spec_file: Path, out: Path, *extra: str, seed: str = "42"):
    args = ["--seed", seed, "run", str(spec_file), "--out", str(out), *extra]
    return runner.invoke(main, args)


class TestRun:
    def test_naive_run_writes_store_and_bundle(self, runner, spec_file, tmp_path):
        out = tmp_path / "runs"
        result = do_run(runner, spec_file, out, "--naive", "1", "--run-id", "r1")
        assert result.exit_code == 0, result.output
        assert (out / "r1.jsonl").exists()
        assert (out / "r1.manifest.json").exists()
        assert (out / "r1.bundle.json").exists()
        assert "arise" in result.output

    def test_adaptive_is_the_default_mode(self, runner, spec_file, tmp_path):
        out = tmp_path / "runs"
        result = do_run(runner, spec_file, out, "--run-id", "r1")
        assert result.exit_code == 0, result.output
        manifest = json.loads((out / "r1.manifest.json").read_text())
        assert manifest["mode"] == "adaptive"
        assert manifest["status"] == "complete"

    def test_conflicting_mode_flags_rejected(self, runner, spec_file, tmp_path):
        result = do_run(
            runner, spec_file, tmp_path / "runs", "--naive", "1", "--budget", "200"
        )
        assert result.exit_code == 1
        assert "one evaluation mode" in all_text(result)

    def test_infeasible_budget_fails_with_the_minimum(self, runner, spec_file, tmp_path):
        out = tmp_path / "runs"
        result = do_run(runner, spec_file, out, "--budget", "5", "--run-id", "r1")
        assert result.exit_code == 1
        assert "minimum feasible 72" in all_text(result)  # 8 samples * 3 levels * 3
        assert not (out / "r1.manifest.json").exists()  # nothing was written

    def test_seed_override_reproduces_bundles(self, runner, spec_file, tmp_path):
        first = tmp_path / "a"
        second = tmp_path / "b"
        assert do_run(runner, spec_file, first, "--naive", "2", "--run-id", "x").exit_code == 0
        assert do_run(runner, spec_file, second, "--naive", "2", "--run-id", "x").exit_code == 0
        a = json.loads((first / "x.bundle.json").read_text())
        b = json.loads((second / "x.bundle.json").read_text())
        assert a["sample_scores"] == b["sample_scores"]
        assert a["scaling_metric"] == b["scaling_metric"]

    def test_dry_run_rejected_for_simulator_specs(self, runner, spec_file, tmp_path):
        result = do_run(runner, spec_file, tmp_path / "runs", "--dry-run")
        assert result.exit_code == 1
        assert "HTTP backend" in all_text(result)


class TestHttpRun:
    def test_run_against_mock_endpoint(self, runner, tmp_path, mock_server, api_key):
        mock_server.reply = lambda body: {
            "choices": [{"message": {"content": "42"}}],
            "usage": {"completion_tokens": 64 if body["reasoning_effort"] == "low" else 256},
        }
        config = {
            "backend": backend_config_dict(mock_server.url),
            "tasks": [
                {
                    "sample_id": "q1",
                    "prompt": "What is the answer?",
                    "judge": {"type": "exact_match", "expected": "42"},
                },
                {
                    "sample_id": "q2",
                    "prompt": "Still 42?",
                    "judge": {"type": "exact_match", "expected": "41"},
                },
            ],
        }
        path = tmp_path / "backend.yaml"
        path.write_text(yaml.safe_dump(config))
        out = tmp_path / "runs"
        result = runner.invoke(
            main, ["run", str(path), "--naive", "1", "--out", str(out), "--run-id", "h1"],
        )
        assert result.exit_code == 0, result.output
        bundle = json.loads((out / "h1.bundle.json").read_text())
        assert bundle["manifest"]["model"] == "mock-model"
        assert bundle["curve"] == [[64.0, 0.5], [256.0, 0.5]]

    def test_dry_run_renders_without_contacting_the_server(self, runner, tmp_path, mock_server):
        config = {"backend": backend_config_dict(mock_server.url), "tasks": []}
        path = tmp_path / "backend.yaml"
        path.write_text(yaml.safe_dump(config))
        result = runner.invoke(main, ["run", str(path), "--dry-run"])
        assert result.exit_code == 0, result.output
        assert '"reasoning_effort": "low"' in result.output
        assert mock_server.bodies == []


class TestCompute:
    def test_recompute_reproduces_the_live_bundle(self, runner, spec_file, tmp_path):
        out = tmp_path / "runs"
        do_run(runner, spec_file, out, "--naive", "1", "--run-id", "r1")
        live = (out / "r1.bundle.json").read_bytes()
        result = runner.invoke(main, ["compute", str(out), "--run-id", "r1"])
        assert result.exit_code == 0, result.output
        assert (out / "r1.bundle.json").read_bytes() == live

    def test_accepts_a_direct_jsonl_path(self, runner, spec_file, tmp_path):
        out = tmp_path / "runs"
        do_run(runner, spec_file, out, "--naive", "1", "--run-id", "r1")
        result = runner.invoke(main, ["compute", str(out / "r1.jsonl")])
        assert result.exit_code == 0, result.output

    def test_empty_store_exits_two(self, runner, tmp_path):
        empty = tmp_path / "none"
        empty.mkdir()
        result = runner.invoke(main, ["compute", str(empty)])
        assert result.exit_code == 2

    def test_unknown_run_id_exits_two(self, runner, spec_file, tmp_path):
        out = tmp_path / "runs"
        do_run(runner, spec_file, out, "--naive", "1", "--run-id", "r1")
        result = runner.invoke(main, ["compute", str(out), "--run-id", "ghost"])
        assert result.exit_code == 2

    def test_incomplete_records_exit_two(self, runner, spec_file, tmp_path):
        out = tmp_path / "runs"
        do_run(runner, spec_file, out, "--naive", "1", "--run-id", "r1")
        trial_file = out / "r1.jsonl"
        lines = trial_file.read_text().strip().split("\n")
        trial_file.write_text("\n".join(lines[:-1]) + "\n")  # drop one configuration
        result = runner.invoke(main, ["compute", str(out), "--run-id", "r1"])
        assert result.exit_code == 2

    def test_ambiguous_store_requires_run_id(self, runner, spec_file, tmp_path):
        out = tmp_path / "runs"
        do_run(runner, spec_file, out, "--naive", "1", "--run-id", "r1")
        do_run(runner, spec_file, out, "--naive", "1", "--run-id", "r2")
        result = runner.invoke(main, ["compute", str(out)])
        assert result.exit_code == 1
        assert "--run-id" in all_text(result)


class TestResume:
    def test_resume_completes_an_interrupted_run(self, runner, spec_file, tmp_path):
        full_dir = tmp_path / "full"
        do_run(runner, spec_file, full_dir, "--naive", "2", "--run-id", "r1")

        cut_dir = tmp_path / "cut"
        cut_dir.mkdir()
        (cut_dir / "r1.manifest.json").write_text((full_dir / "r1.manifest.json").read_text())
        kept = [
            line
            for line in (full_dir / "r1.jsonl").read_text().strip().split("\n")
            if json.loads(line)["trial_index"] == 0
        ]
        (cut_dir / "r1.jsonl").write_text("\n".join(kept) + "\n")

        result = runner.invoke(
            main,
            ["--seed", "42", "run", str(spec_file), "--out", str(cut_dir),
             "--run-id", "r1", "--resume"],
        )
        assert result.exit_code == 0, result.output
        assert (cut_dir / "r1.bundle.json").read_bytes() == (
            full_dir / "r1.bundle.json"
        ).read_bytes()

    def test_resume_requires_run_id(self, runner, spec_file, tmp_path):
        result = do_run(runner, spec_file, tmp_path / "runs", "--resume")
        assert result.exit_code == 1
        assert "--run-id" in all_text(result)

    def test_resume_rejects_mode_flags(self, runner, spec_file, tmp_path):
        out = tmp_path / "runs"
        do_run(runner, spec_file, out, "--naive", "2", "--run-id", "r1")
        result = do_run(runner, spec_file, out, "--resume", "--run-id", "r1", "--naive", "5")
        assert result.exit_code == 1
        assert "manifest" in all_text(result)


class TestFormatsAndScaling:
    def test_csv_format(self, runner, spec_file, tmp_path):
        out = tmp_path / "runs"
        result = runner.invoke(
            main,
            ["--format", "csv", "run", str(spec_file), "--naive", "1",
             "--out", str(out), "--run-id", "r1"],
        )
        assert result.exit_code == 0
        header = result.output.strip().split("\n")[0]
        assert header == "model,benchmark,arise,scaling_metric,n_samples,n_levels,unconverged_count"

    def test_json_format_parses(self, runner, spec_file, tmp_path):
        out = tmp_path / "runs"
        result = runner.invoke(
            main,
            ["--format", "json", "run", str(spec_file), "--naive", "1",
             "--out", str(out), "--run-id", "r1"],
        )
        assert result.exit_code == 0
        stdout_json = result.output[: result.output.rindex("]") + 1]
        rows = json.loads(stdout_json)
        assert rows[0]["n_samples"] == 8
        assert isinstance(rows[0]["arise"], float)

    def test_sm_x1000_scales_the_reported_metric(self, runner, spec_file, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        plain = runner.invoke(
            main,
            ["--format", "json", "run", str(spec_file), "--naive", "3",
             "--out", str(out_a), "--run-id", "r1"],
        )
        scaled = runner.invoke(
            main,
            ["--format", "json", "--sm-x1000", "run", str(spec_file), "--naive", "3",
             "--out", str(out_b), "--run-id", "r1"],
        )
        plain_sm = json.loads(plain.output[: plain.output.rindex("]") + 1])[0]["scaling_metric"]
        scaled_sm = json.loads(scaled.output[: scaled.output.rindex("]") + 1])[0]["scaling_metric"]
        assert scaled_sm == pytest.approx(1000 * plain_sm, abs=5e-4)  # both rounded to 6 dp


class TestSimulate:
    def test_summary_and_per_run_rows(self, runner, spec_file, tmp_path):
        rows_path = tmp_path / "rows.csv"
        result = runner.invoke(
            main,
            ["simulate", str(spec_file), "--runs", "3", "-m", "adaptive",
             "-m", "naive:2", "--out", str(rows_path)],
        )
        assert result.exit_code == 0, result.output
        assert "adaptive" in result.output
        lines = rows_path.read_text().strip().split("\n")
        assert lines[0] == "mode,run,arise,scaling_metric,trials,unconverged"
        assert len(lines) == 1 + 2 * 3

    def test_rejects_unknown_mode(self, runner, spec_file):
        result = runner.invoke(main, ["simulate", str(spec_file), "-m", "wat"])
        assert result.exit_code == 1


class TestReport:
    def test_table_and_exports(self, runner, spec_file, tmp_path):
        out = tmp_path / "runs"
        do_run(runner, spec_file, out, "--naive", "1", "--run-id", "r1")
        exports = tmp_path / "exports"
        result = runner.invoke(
            main,
            ["report", str(out / "r1.bundle.json"), "--curves", "--transitions",
             "--results-csv", str(exports / "results.csv"), "--out-dir", str(exports)],
        )
        assert result.exit_code == 0, result.output
        assert (exports / "r1.curve.csv").exists()
        assert (exports / "r1.transitions.csv").exists()
        assert (exports / "results.csv").read_text().startswith(
            "model,benchmark,arise,scaling_metric,n_samples,levels"
        )

    def test_multiple_bundles_share_one_table(self, runner, spec_file, tmp_path):
        out = tmp_path / "runs"
        do_run(runner, spec_file, out, "--naive", "1", "--run-id", "r1")
        do_run(runner, spec_file, out, "--naive", "2", "--run-id", "r2")
        result = runner.invoke(
            main,
            ["--format", "csv", "report",
             str(out / "r1.bundle.json"), str(out / "r2.bundle.json")],
        )
        assert result.exit_code == 0
        lines = result.output.strip().split("\n")
        assert len(lines) == 3  # one header, two rows
