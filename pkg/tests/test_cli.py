import csv
import subprocess
import sys

import pytest

from ranklab import bounds, cli


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_count_accepts_scientific_notation():
    assert cli.count("1e6") == 1_000_000
    assert cli.counts("10,1e2") == (10, 100)
    for bad in ("1.5", "-3", "nan", "x"):
        with pytest.raises(Exception):
            cli.count(bad)


def test_dp_rank_prints_exact_values(capsys):
    code, out, _ = run_cli(capsys, "dp-rank", "--n", "1,2")
    assert code == 0
    assert "n=1: value 1" in out and "n=2: value 1.5" in out


def test_dp_full_csv(tmp_path, capsys):
    path = tmp_path / "full.csv"
    code, out, _ = run_cli(capsys, "dp-full", "--n", "2", "--grid", "2000", "--out", str(path))
    assert code == 0
    header, row = read_csv(path)
    assert header == ["n", "grid", "value", "thresholds"]
    assert float(row[2]) == pytest.approx(1.25, abs=1e-5)
    assert (tmp_path / "full.csv.summary.txt").read_text() == out
    assert "command=dp-full" in (tmp_path / "full.csv.config").read_text()


def test_mlambda_deterministic_increments(tmp_path, capsys):
    path = tmp_path / "m.csv"
    code, out, _ = run_cli(capsys, "mlambda", "--dist", "det:0.5", "--lambda", "1", "--p", "2", "--samples", "1e3", "--out", str(path))
    assert code == 0 and "E M^2 = 0 +- 0" in out
    rows = read_csv(path)
    assert rows[0] == ["sample_index", "value", "argmax_index", "stop_reason"]
    assert len(rows) == 1001 and {r[1] for r in rows[1:]} == {"0.0"}


def test_mlambda_classify_and_tail_fit(capsys):
    code, out, _ = run_cli(capsys, "mlambda", "--lambda", "2", "--samples", "2e4", "--classify", "--tail-fit")
    assert code == 0
    assert "verdict,slope,p,lambda,dist" in out and "lundberg_root=0.796812" in out


@pytest.mark.parametrize(
    "argv",
    [
        ["mlambda", "--lambda", "0.5"],
        ["mlambda", "--dist", "cauchy:1"],
        ["robbins", "--rule", "fixed", "--trials", "10"],
        ["robbins", "--theta", "1,2"],
        ["robbins", "--rule", "fixed", "--optimize"],
        ["dp-full", "--n", "4"],
        ["poisson", "--boundary", "const:9", "--scap", "5"],
        ["verify", "--samples", "3"],
        ["nonsense"],
        [],
    ],
)
def test_usage_errors_exit_2(capsys, argv):
    code, _, _ = run_cli(capsys, *argv)
    assert code == 2


def test_violation_exits_1(monkeypatch, capsys):
    def broken_sweep(*args, **kwargs):
        cell = bounds.SweepCell("chain", 1.0, 2.0)
        cell.samples, cell.checks, cell.violations = 1, 1, 1
        cell.min_slack, cell.lhs_sum, cell.rhs_sum = -1.0, 2.0, 1.0
        return [cell]

    monkeypatch.setattr(bounds, "pathwise_sweep", broken_sweep)
    code, out, _ = run_cli(capsys, "verify", "--suite", "chain", "--trials", "1")
    assert code == 1 and "violation found" in out


def test_verify_chain_ok(tmp_path, capsys):
    path = tmp_path / "v.csv"
    code, out, _ = run_cli(capsys, "verify", "--suite", "chain", "--trials", "500", "--p", "1,2", "--lambda", "2", "--out", str(path))
    assert code == 0 and "no violations" in out
    rows = read_csv(path)
    assert rows[0] == ["suite", "params", "lhs", "rhs", "slack", "violated"]
    assert [r[0] for r in rows[1:]] == ["chain", "chain"]
    assert all(r[5] == "false" for r in rows[1:])


def test_config_file_values_are_overridden_by_flags(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\ncommand=dp-rank\nn=2,3\n")
    code, out, _ = run_cli(capsys, "--config", str(cfg))
    assert code == 0 and "n=3" in out
    code, out, _ = run_cli(capsys, "dp-rank", "--config", str(cfg), "--n", "1")
    assert code == 0 and "n=1: value 1" in out and "n=3" not in out


def test_config_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("command=dp-rank\nbogus=1\n")
    assert run_cli(capsys, "--config", str(cfg))[0] == 2
    assert run_cli(capsys, "--config", str(tmp_path / "missing.cfg"), "dp-rank")[0] == 2


def _robbins_csv(tmp_path, capsys, name, *extra):
    path = tmp_path / name
    argv = ["robbins", "--n", "100,1000", "--trials", "3e4", "--chunk-size", "1e4", "--seed", "11", "--out", str(path), *extra]
    assert run_cli(capsys, *argv)[0] == 0
    return path


def test_output_is_byte_identical_across_runs_and_workers(tmp_path, capsys):
    a = _robbins_csv(tmp_path, capsys, "a.csv").read_bytes()
    b = _robbins_csv(tmp_path, capsys, "b.csv").read_bytes()
    c = _robbins_csv(tmp_path, capsys, "c.csv", "--workers", "2").read_bytes()
    assert a == b == c


def test_config_echo_replays_the_run(tmp_path, capsys):
    first = _robbins_csv(tmp_path, capsys, "first.csv")
    replay = tmp_path / "replay.csv"
    code, _, _ = run_cli(capsys, "--config", f"{first}.config", "--out", str(replay))
    assert code == 0
    assert replay.read_bytes() == first.read_bytes()


def test_poisson_no_stop_column(tmp_path, capsys):
    path = tmp_path / "p.csv"
    code, out, _ = run_cli(capsys, "poisson", "--boundary", "zero", "--scap", "5", "--trials", "100", "--out", str(path))
    assert code == 0 and "no_stop_frequency=1" in out
    rows = read_csv(path)
    assert rows[0] == ["trial", "stopped_t", "stopped_s", "rank", "no_stop_flag"]
    assert {r[4] for r in rows[1:]} == {"true"}


def test_installed_entry_point():
    done = subprocess.run([sys.executable, "-m", "ranklab.cli", "dp-rank", "--n", "3"], capture_output=True, text=True)
    assert done.returncode == 0 and "1.66666" in done.stdout
