import json
import subprocess
import sys

import pytest

from geoformal.cli import dispatch


def run_cli(capsys, *argv) -> tuple[int, dict | None]:
    code = dispatch(list(argv))
    out = capsys.readouterr().out.strip()
    payload = json.loads(out) if out else None
    return code, payload


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

def test_solve_pythagorean(tmp_path, capsys):
    program = tmp_path / "p.txt"
    program.write_text("gougu_add 3.0 4.0\n")
    code, payload = run_cli(capsys, "solve", "--program", str(program),
                            "--numbers", "3,4")
    assert code == 0
    assert payload["answer"] == 5.0


def test_solve_uses_problem_numbers(tmp_path, capsys):
    program = tmp_path / "p.txt"
    program.write_text("g_add N_0 N_1\ng_mul N_0 N_1\n")
    code, payload = run_cli(capsys, "solve", "--program", str(program),
                            "--numbers", "2.5,4")
    assert code == 0
    assert payload["answers"] == [6.5, 10.0]


def test_solve_bad_program_is_data_error(tmp_path, capsys):
    program = tmp_path / "p.txt"
    program.write_text("nosuch 1.0\n")
    code, _ = run_cli(capsys, "solve", "--program", str(program))
    assert code == 2


def test_solve_missing_file_is_data_error(tmp_path, capsys):
    code, _ = run_cli(capsys, "solve", "--program", str(tmp_path / "none.txt"))
    assert code == 2


# ---------------------------------------------------------------------------
# usage and verification exit codes
# ---------------------------------------------------------------------------

def test_unknown_subcommand_is_usage_error(capsys):
    assert dispatch(["frobnicate"]) == 1


def test_missing_required_flag_is_usage_error(capsys):
    assert dispatch(["gen-data", "--n", "3"]) == 1


def test_selftest_passes(capsys):
    code, payload = run_cli(capsys, "selftest", "--seed", "0")
    assert code == 0
    assert payload["ok"] is True
    assert payload["failed"] == 0


def test_gradcheck_passes_quick(capsys):
    code, payload = run_cli(capsys, "gradcheck", "--seed", "1", "--points", "3")
    assert code == 0
    assert payload["ok"] is True


# ---------------------------------------------------------------------------
# gen-data / adjudicate / eval
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    code = dispatch(["gen-data", "--n", "6", "--seed", "11", "--out", str(out)])
    assert code == 0
    return out


def test_gen_data_writes_snapshot(dataset):
    snapshot = json.loads((dataset / "gen-config.json").read_text())
    assert snapshot["schema"] == 1
    assert snapshot["seed"] == 11


def test_adjudicate_and_eval_with_gt_programs(dataset, tmp_path, capsys):
    # candidate lists that are just the ground-truth program
    problems = [
        json.loads(line)
        for line in (dataset / "problems.jsonl").read_text().splitlines()
    ]
    cands = tmp_path / "cands.jsonl"
    with open(cands, "w") as fh:
        for rec in problems:
            fh.write(json.dumps(
                {"id": rec["id"], "candidates": [rec["gt_program"]]}
            ) + "\n")

    code, payload = run_cli(
        capsys, "adjudicate", "--problems", str(dataset / "problems.jsonl"),
        "--candidates", str(cands), "--beam", "10",
    )
    assert code == 0
    assert payload["executable_fraction"] == 1.0
    assert all(r["first_correct_rank"] == 0 for r in payload["rows"])

    report_path = tmp_path / "report.json"
    code, payload = run_cli(
        capsys, "eval", "--problems", str(dataset / "problems.jsonl"),
        "--candidates", str(cands), "--beam", "10",
        "--out", str(report_path),
    )
    assert code == 0
    assert payload["top1"] == 1.0
    assert payload["completion"] == 1.0
    assert payload["choice"] == 1.0
    assert report_path.exists()


def test_eval_schema_error_exit_code(dataset, tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    code, _ = run_cli(
        capsys, "eval", "--problems", str(dataset / "problems.jsonl"),
        "--candidates", str(bad),
    )
    assert code == 2


def test_eval_jobs_parallel_matches_serial(dataset, tmp_path, capsys):
    problems = [
        json.loads(line)
        for line in (dataset / "problems.jsonl").read_text().splitlines()
    ]
    cands = tmp_path / "c.jsonl"
    with open(cands, "w") as fh:
        for rec in problems:
            fh.write(json.dumps(
                {"id": rec["id"], "candidates": [rec["gt_program"], "junk"]}
            ) + "\n")
    _, serial = run_cli(
        capsys, "eval", "--problems", str(dataset / "problems.jsonl"),
        "--candidates", str(cands),
    )
    _, parallel = run_cli(
        capsys, "eval", "--problems", str(dataset / "problems.jsonl"),
        "--candidates", str(cands), "--jobs", "4",
    )
    assert serial == parallel


# ---------------------------------------------------------------------------
# train-toy smoke (tiny budgets; the full pipeline runs in acceptance)
# ---------------------------------------------------------------------------

def test_train_mae_smoke(dataset, tmp_path, capsys):
    out = tmp_path / "mae"
    code, payload = run_cli(
        capsys, "train-toy", "--stage", "mae", "--data", str(dataset),
        "--seed", "1", "--out", str(out), "--steps", "3",
    )
    assert code == 0
    assert payload["stage"] == "mae"
    assert out.with_suffix(".bin").exists()
    assert out.with_suffix(".json").exists()
    assert out.with_suffix(".config.json").exists()
    log_lines = out.with_suffix(".log.jsonl").read_text().splitlines()
    assert len(log_lines) == 3


def test_train_sft_and_decode_smoke(dataset, tmp_path, capsys):
    out = tmp_path / "sft"
    code, _ = run_cli(
        capsys, "train-toy", "--stage", "sft", "--data", str(dataset),
        "--seed", "1", "--out", str(out), "--steps", "3",
    )
    assert code == 0
    cands = tmp_path / "cands.jsonl"
    code, payload = run_cli(
        capsys, "decode", "--ckpt", str(out),
        "--problems", str(dataset / "problems.jsonl"),
        "--beam", "2", "--max-len", "6", "--out", str(cands),
    )
    assert code == 0
    assert payload["problems"] == 6
    table = {
        json.loads(line)["id"]: json.loads(line)["candidates"]
        for line in cands.read_text().splitlines()
    }
    assert len(table) == 6
    assert all(len(v) <= 2 for v in table.values())


def test_train_with_config_file(dataset, tmp_path, capsys):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({
        "schema": 1,
        "gsformer": {"n_layers": 2, "sgs_layers": [1], "lam": 0.25,
                     "tau_final": 0.5},
        "stages": {"align": {"steps": 2, "batch": 4}},
    }))
    out = tmp_path / "align"
    code, payload = run_cli(
        capsys, "train-toy", "--stage", "align", "--data", str(dataset),
        "--config", str(config), "--seed", "1", "--out", str(out),
    )
    assert code == 0
    assert payload["steps"] == 2
    snapshot = json.loads(out.with_suffix(".config.json").read_text())
    assert snapshot["gsformer"]["n_layers"] == 2
    assert snapshot["gsformer"]["lam"] == 0.25
    assert snapshot["stages"]["align"]["batch"] == 4
    log_lines = out.with_suffix(".log.jsonl").read_text().splitlines()
    first, last = json.loads(log_lines[0]), json.loads(log_lines[-1])
    assert first["tau"] == 1.0
    assert last["tau"] == 0.5
    assert "keep_rates" in first


def test_train_rejects_bad_config_schema(dataset, tmp_path, capsys):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"schema": 99}))
    code, _ = run_cli(
        capsys, "train-toy", "--stage", "align", "--data", str(dataset),
        "--config", str(config), "--seed", "1",
        "--out", str(tmp_path / "x"),
    )
    assert code == 2


def test_env_seed_fallback(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("GEOFORMAL_SEED", "123")
    out = tmp_path / "env_data"
    code, payload = run_cli(capsys, "gen-data", "--n", "2", "--out", str(out))
    assert code == 0
    assert payload["seed"] == 123


def test_selftest_stdout_byte_identical():
    cmd = [sys.executable, "-m", "geoformal.cli", "selftest", "--seed", "0"]
    a = subprocess.run(cmd, capture_output=True)
    b = subprocess.run(cmd, capture_output=True)
    assert a.returncode == b.returncode == 0
    assert a.stdout == b.stdout
