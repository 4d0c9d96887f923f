import csv
import json

import pytest

from gekf.cli import main, parse_grid


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_check_boundary_report(capsys):
    code, out, _ = run(["check", "--system", "example1.json", "--p", "0.22", "--q", "0.65"], capsys)
    data = json.loads(out)
    assert code == 0
    assert data["prop1_max_p"] == pytest.approx(0.22, abs=1e-3)
    assert data["observability_index"] == 2
    assert data["necessary_value"] == pytest.approx(0.5915)


def test_check_second_example(capsys, tmp_path):
    out = tmp_path / "r.json"
    code, _, _ = run(
        ["check", "--system", "example2.json", "--p", "0.45", "--q", "0.5", "--out", str(out)], capsys
    )
    data = json.loads(out.read_text())
    assert code == 0 and data["theorem1_ok"] and not data["prop1_ok"]


def test_check_inconclusive_when_necessary_fails(capsys):
    code, out, _ = run(["check", "--system", "example1.json", "--p", "0.2", "--q", "0.3"], capsys)
    assert code == 2
    data = json.loads(out)
    assert data["best_radius"] is None and not data["verdict_available"]


def test_missing_flag_is_usage_error(capsys):
    code, _, err = run(["check", "--system", "example1.json", "--p", "0.22"], capsys)
    assert code == 1 and "--q" in err


@pytest.mark.parametrize("bad", ["0", "1", "1.5", "abc"])
def test_probability_validated_before_work(capsys, bad):
    code, _, err = run(["check", "--system", "example1.json", "--p", bad, "--q", "0.5"], capsys)
    assert code == 1 and "--p" in err


def test_missing_file_and_bad_json(capsys, tmp_path):
    code, _, err = run(["check", "--system", str(tmp_path / "none.json"), "--p", "0.2", "--q", "0.5"], capsys)
    assert code == 1 and "not found" in err
    bad = tmp_path / "bad.json"
    bad.write_text('{"A": [[1, 0],\n [0, 1]], "C": [[1, 0]],\n "Q": [[1, 0], [0, 1]], "R": [[1, "a"]]}')
    code, _, err = run(["check", "--system", str(bad), "--p", "0.2", "--q", "0.5"], capsys)
    assert code == 1 and "R: row 1, column 2" in err


def test_bound_commands(capsys):
    code, out, _ = run(["bound", "--system", "example1.json", "--q", "0.65"], capsys)
    data = json.loads(out)
    assert code == 0 and data["p_lower_bound"] == 1.0
    assert data["prop1_max_p"] == pytest.approx(0.22, abs=1e-3)
    code, out, err = run(["bound", "--system", "example1.json", "--q", "0.3"], capsys)
    assert code == 2 and out == "" and "1.183" in err


def test_simulate_single_trial(capsys, tmp_path):
    out, peaks = tmp_path / "s.csv", tmp_path / "p.csv"
    argv = ["simulate", "--system", "example1.json", "--p", "0.5", "--q", "0.65", "--steps", "1000",
            "--trials", "1", "--seed", "7", "--out", str(out), "--peaks-out", str(peaks)]
    assert run(argv, capsys)[0] == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 1000 and rows[0] == {"k": "1", "gamma": "1", "norm_P": "1"}
    norms = [float(r["norm_P"]) for r in rows]
    # bounded sawtooth: stays well below any exponential blow-up
    assert max(norms) < 1e4 and min(norms[1:]) > 1
    prows = list(csv.DictReader(peaks.open()))
    assert prows and all(float(r["norm_P_beta_j"]) == norms[int(r["beta_j"]) - 1] for r in prows)


def test_simulate_ensemble_reports_verdict(capsys):
    argv = ["simulate", "--system", "example2.json", "--p", "0.99", "--q", "0.5", "--steps", "400",
            "--trials", "50", "--seed", "7"]
    code, out, err = run(argv, capsys)
    assert code == 0
    assert out.splitlines()[0] == "k,mean_norm,diverged_fraction"
    assert "verdict=diverging" in err


def test_simulate_peaks_need_single_trial(capsys, tmp_path):
    argv = ["simulate", "--system", "example1.json", "--p", "0.5", "--q", "0.65", "--trials", "2",
            "--steps", "10", "--peaks-out", str(tmp_path / "x.csv")]
    assert run(argv, capsys)[0] == 1


def test_sweep_output(capsys, tmp_path):
    out = tmp_path / "sw.csv"
    argv = ["sweep", "--system", "example2.json", "--p-grid", "0.3:0.9:0.6", "--q-grid", "0.5,0.9",
            "--steps", "400", "--trials", "50", "--seed", "1", "--out", str(out)]
    assert run(argv, capsys)[0] == 0
    rows = list(csv.DictReader(out.open()))
    assert [(float(r["p"]), float(r["q"])) for r in rows] == [(0.3, 0.5), (0.9, 0.5), (0.3, 0.9), (0.9, 0.9)]
    assert rows[1]["verdict"] == "diverging"
    assert {r["verdict"] for r in rows} <= {"bounded", "diverging", "inconclusive"}


def test_parse_grid():
    assert parse_grid("0.05:0.95:0.1") == pytest.approx([0.05 + 0.1 * i for i in range(10)])
    assert len(parse_grid("0.45:0.95:0.1")) == 6
    assert parse_grid("0.2,0.4") == [0.2, 0.4]


@pytest.mark.parametrize("grid", ["0.1:0.5", "0.5:0.1:0.1", "0.1:0.5:0", "0:0.5:0.1", "x"])
def test_bad_grid_is_usage_error(capsys, grid):
    argv = ["sweep", "--system", "example1.json", "--p-grid", grid, "--q-grid", "0.5"]
    assert run(argv, capsys)[0] == 1


def test_unwritable_output(capsys, tmp_path):
    argv = ["bound", "--system", "example1.json", "--q", "0.65", "--out", str(tmp_path / "no" / "x.json")]
    code, _, err = run(argv, capsys)
    assert code == 1 and "cannot write" in err


def test_verify_passes(capsys):
    code, out, _ = run(["verify", "--seed", "1"], capsys)
    assert code == 0
    lines = out.splitlines()
    assert len(lines) == 7 and all(line.startswith("PASS ") for line in lines)


def test_verify_reports_failing_property(capsys, monkeypatch):
    from gekf import verify

    def broken(seed):
        return verify.PropertyResult("vec_kron_identities", False, "forced")

    monkeypatch.setitem(verify.PROPERTIES, "vec_kron_identities", broken)
    code, out, err = run(["verify", "--seed", "1"], capsys)
    assert code == 1
    assert "FAIL vec_kron_identities" in out and "vec_kron_identities" in err
