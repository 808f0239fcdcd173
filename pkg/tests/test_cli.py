import hashlib
import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

from pbfplan.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_MAX_ITER, EXIT_OK, OUTPUTS, main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TOY = CONFIGS / "toy.json"

PLAN_FILES = {"optimal_fields.csv", "spots_optimized.csv", "solve_log.csv", "summary.json", "timing.json"}


def _toy(tmp_path, name="run.json", **sections):
    cfg = json.loads(TOY.read_text())
    cfg["mask"]["path"] = "builtin:toy_2x2.txt"
    for section, values in sections.items():
        cfg[section].update(values)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def _hashes(directory: Path):
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(directory.iterdir())
        if p.name != "timing.json"
    }


def test_toy_plan_is_fast_and_complete(tmp_path, capsys):
    t0 = time.perf_counter()
    assert main(["plan", "--config", str(TOY), "--out", str(tmp_path)]) == EXIT_OK
    assert time.perf_counter() - t0 < 1.0
    assert PLAN_FILES <= {p.name for p in tmp_path.iterdir()}
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"] == "optimal"
    assert summary["voxels"] == 4 and summary["knots"] == 10
    assert "optimal" in capsys.readouterr().out


def test_help_lists_every_output(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for name in sorted(PLAN_FILES) + ["compare_summary.csv", "qp.txt", "qp_layout.json", "simulation.json"]:
        assert name in text
    assert text.count("PBFPLAN_OUT") >= 1 and "exit codes" in text
    assert OUTPUTS.splitlines()[0] in text


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "pbfplan.cli", "export", "--config", str(TOY), "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == EXIT_OK, proc.stderr
    layout = json.loads((tmp_path / "qp_layout.json").read_text())
    assert layout["voxels"] == 4 and layout["knots"] == 10
    assert (tmp_path / "qp.txt").stat().st_size > 0


def test_malformed_mask_exits_2(tmp_path, capsys):
    (tmp_path / "m.txt").write_text("11\n1x\n")
    cfg = _toy(tmp_path, mask={"path": "m.txt"})
    assert main(["plan", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "line 2, column 2" in capsys.readouterr().err


@pytest.mark.parametrize(
    "text, pattern",
    [('{"seed": }', "line 1, column 10"), ('{"bogus": 1}', "unknown config key"), ("[]", "JSON object")],
)
def test_bad_config_exits_2(tmp_path, capsys, text, pattern):
    path = tmp_path / "bad.json"
    path.write_text(text)
    assert main(["plan", "--config", str(path)]) == EXIT_CONFIG
    assert pattern in capsys.readouterr().err


def test_bad_thread_env_exits_2(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PBFPLAN_THREADS", "many")
    assert main(["plan", "--config", str(TOY), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "PBFPLAN_THREADS" in capsys.readouterr().err


def test_unreachable_melt_exits_3(tmp_path, capsys):
    cfg = _toy(tmp_path, schedule={"dt_us": 1.0})
    assert main(["plan", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INFEASIBLE
    assert "first violated constraint family: full_melt" in capsys.readouterr().err


def test_hot_start_off_mask_exits_3(tmp_path, capsys):
    (tmp_path / "m.txt").write_text("10\n11\n")
    cfg = _toy(tmp_path, mask={"path": "m.txt"}, environment={"initial_K": 1700.0})
    assert main(["plan", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INFEASIBLE
    assert "no_melt" in capsys.readouterr().err


def test_iteration_limit_exits_4(tmp_path, capsys):
    cfg = _toy(tmp_path, solver={"max_iterations": 1})
    assert main(["plan", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_MAX_ITER
    assert "iteration limit" in capsys.readouterr().err


def test_simulate_requires_plan(tmp_path, capsys):
    assert main(["simulate", "--config", str(TOY), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "run plan first" in capsys.readouterr().err


def test_simulate_after_plan(tmp_path):
    assert main(["plan", "--config", str(TOY), "--out", str(tmp_path)]) == EXIT_OK
    assert main(["simulate", "--config", str(TOY), "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "simulation.json").read_text())
    assert set(report) == {"optimized_exact", "optimized_greedy"}
    for row in report.values():
        assert row["energy_residual"] <= 1e-6
    header = (tmp_path / "timeseries_optimized_greedy.csv").read_text().splitlines()[0]
    assert header == "time_s,variance_K2,cumulative_K2s,mask_max_K,mask_min_K"
    assert (tmp_path / "snapshot_optimized_exact_90us.pgm").read_bytes().startswith(b"P2")


def test_compare_outputs(tmp_path):
    assert main(["compare", "--config", str(TOY), "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "compare_summary.csv").read_text().splitlines()
    assert lines[0] == (
        "scenario,cumulative_K2s,opt_exact_reduction_pct,opt_greedy_reduction_pct,over,under,erroneous"
    )
    assert [line.split(",")[0] for line in lines[1:]] == [
        "optimized_exact",
        "optimized_greedy",
        "uniform_exact",
        "uniform_greedy",
        "random_spot",
    ]
    for name in ("spots_uniform.csv", "spots_random.csv", "compare_random_spot.csv", "compare.json"):
        assert (tmp_path / name).is_file()


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PBFPLAN_OUT", str(tmp_path / "env"))
    assert main(["plan", "--config", str(TOY)]) == EXIT_OK
    assert PLAN_FILES <= {p.name for p in (tmp_path / "env").iterdir()}


@pytest.mark.parametrize("command", ["plan", "compare"])
def test_outputs_identical_across_runs_and_threads(tmp_path, monkeypatch, command):
    runs = []
    for i, threads in enumerate([1, 1, 4]):
        out = tmp_path / f"r{i}"
        monkeypatch.setenv("PBFPLAN_THREADS", str(threads))
        assert main([command, "--config", str(TOY), "--out", str(out)]) == EXIT_OK
        runs.append(_hashes(out))
    assert runs[0] == runs[1] == runs[2]
    assert len(runs[0]) >= 4


def test_cli_does_not_leak_thread_limits(tmp_path):
    from threadpoolctl import threadpool_info

    before = [d["num_threads"] for d in threadpool_info()]
    main(["plan", "--config", str(TOY), "--threads", "1", "--out", str(tmp_path)])
    assert [d["num_threads"] for d in threadpool_info()] == before
