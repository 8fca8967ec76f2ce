"""Tests for the ppslab command line: scenarios, operations and exit codes."""
import csv
import io
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from ppslab.core import (
    EXIT_DOMAIN_ERROR,
    EXIT_OK,
    EXIT_USAGE_ERROR,
    ScenarioResult,
    format_cell,
    main,
    render_table,
)
from ppslab.qmcore import matrix_from_dict, matrix_to_dict

ZERO_H = matrix_to_dict(np.zeros((2, 2)))


def read_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    return rows[0], rows[1:]


def error_line(stderr):
    """First stderr line that parses as the error JSON object."""
    for line in stderr.splitlines():
        if line.startswith('{'):
            return json.loads(line)
    raise AssertionError(f'no error JSON in stderr: {stderr!r}')


@pytest.fixture
def log_file(tmp_path):
    return str(tmp_path / "run.log")


# ============================================================================
# OPERATIONS
# ============================================================================

def test_weak_value_operation(capsys):
    """|0>, |+>, sigma_3 gives the weak value 1."""
    code = main(["weak-value", "--rho", "ket0", "--effect", "plus", "--observable", "pauli_z"])
    assert code == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["re"] == pytest.approx(1.0)
    assert payload["im"] == pytest.approx(0.0, abs=1e-15)


def test_weak_value_of_pauli_y_is_imaginary(capsys):
    assert main(["weak-value", "--rho", "ket0", "--effect", "plus", "--observable", "pauli_y"]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["im"] == pytest.approx(1.0)


def test_classify_and_norm_bound_operations(capsys):
    assert main(["classify", "--rho", "ket0", "--effect", "plus"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["kind"] == "unusual"
    assert main(["norm-bound", "--rho", "ket0", "--effect", "plus"]) == EXIT_OK
    bound = json.loads(capsys.readouterr().out)
    assert bound["holds"] is True
    assert bound["norm"] == pytest.approx(np.sqrt(2))


def test_abl_and_strong_pps_operations_agree(capsys):
    args = ["--rho", "ket0", "--effect", "plus", "--observable", "pauli_z"]
    assert main(["abl-probabilities", *args]) == EXIT_OK
    abl = json.loads(capsys.readouterr().out)
    assert main(["strong-pps", *args]) == EXIT_OK
    strong = json.loads(capsys.readouterr().out)
    assert abl["eigenvalues"] == pytest.approx([-1.0, 1.0])
    assert abl["probabilities"] == pytest.approx([0.0, 1.0], abs=1e-12)
    assert strong["probabilities"] == pytest.approx(abl["probabilities"], abs=1e-12)


def test_operation_reads_matrix_files(capsys, write_json):
    rho = write_json("rho.json", matrix_to_dict(np.diag([0.7, 0.3])))
    assert main(["born-probability", "--rho", rho, "--effect", "ket0"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["probability"] == pytest.approx(0.7)
    assert main(["expectation", "--rho", rho, "--observable", "pauli_z"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["expectation"] == pytest.approx(0.4)


def test_simulated_data_reconstructs_the_connection_state(capsys, tmp_path):
    """simulate-weak-values writes the CSV that reconstruct turns back into w."""
    data = str(tmp_path / "data.csv")
    report = tmp_path / "report.json"
    assert main(["simulate-weak-values", "--rho", "ket0", "--effect", "plus", "--out", data]) == EXIT_OK
    header, rows = read_csv(open(data, encoding="utf-8").read())
    assert header == ["probe_index", "re_weak_value", "im_weak_value"]
    assert [int(r[0]) for r in rows] == [0, 1, 2, 3]

    assert main(["reconstruct", "--data", data, "--out", str(report)]) == EXIT_OK
    payload = json.loads(report.read_text())
    assert np.allclose(matrix_from_dict(payload["w"]["w"]), [[1, 1], [0, 0]], atol=1e-12)
    assert payload["residual_norm"] <= 1e-12
    assert payload["trace_deviation"] <= 1e-12


def test_detector_reconstruction_from_a_data_file(capsys, tmp_path, write_json):
    effect = write_json("effect.json", matrix_to_dict(np.diag([0.9, 0.1])))
    data = str(tmp_path / "detector.csv")
    assert main(["simulate-weak-values", "--rho", "mixed", "--effect", effect, "--out", data]) == EXIT_OK
    assert main(["reconstruct-detector", "--data", data, "--post-selection-prob", "0.5"]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert np.allclose(matrix_from_dict(payload["effect"]), np.diag([0.9, 0.1]), atol=1e-10)
    assert payload["consistent"] is True
    assert payload["trace"] == pytest.approx(1.0)


def test_detector_reconstruction_of_inconsistent_data(capsys, tmp_path):
    """A non-Hermitian connection state cannot be a retrodictive state: exit 1, or a flag with --lenient."""
    data = str(tmp_path / "data.csv")
    assert main(["simulate-weak-values", "--rho", "ket0", "--effect", "plus", "--out", data]) == EXIT_OK
    args = ["reconstruct-detector", "--data", data, "--post-selection-prob", "0.5"]
    assert main(args) == EXIT_DOMAIN_ERROR
    err = error_line(capsys.readouterr().err)
    assert err["error"] == "InconsistentData"
    assert err["operation"] == "reconstruct-detector"
    assert main([*args, "--lenient"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["consistent"] is False


def test_reconstruct_data_errors(capsys, tmp_path):
    assert main(["reconstruct", "--data", str(tmp_path / "missing.csv")]) == EXIT_USAGE_ERROR
    assert error_line(capsys.readouterr().err)["error"] == "ConfigError"

    odd = tmp_path / "odd.csv"
    odd.write_text("probe_index,re_weak_value,im_weak_value\n0,1,0\n1,0,0\n2,0,0\n")
    assert main(["reconstruct", "--data", str(odd)]) == EXIT_DOMAIN_ERROR
    assert error_line(capsys.readouterr().err)["error"] == "InconsistentData"


def test_connection_state_operation_writes_out_file(tmp_path):
    out = tmp_path / "w.json"
    assert main(["connection-state", "--rho", "ket0", "--effect", "plus", "--out", str(out)]) == EXIT_OK
    payload = json.loads(out.read_text())
    assert payload["w"]["re"] == pytest.approx([1.0, 1.0, 0.0, 0.0])
    assert payload["post_selection_prob"] == pytest.approx(0.5)


def test_retrodictive_state_operation(capsys, write_json):
    effect = write_json("effect.json", matrix_to_dict(np.diag([0.9, 0.1])))
    assert main(["retrodictive-state", "--effect", effect]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["w"]["re"] == pytest.approx([0.9, 0.0, 0.0, 0.1])
    assert payload["post_selection_prob"] == pytest.approx(0.5)


def test_posterior_operation_excludes_impossible_outcomes(capsys):
    assert main(["posterior", "--rho", "ket0", "--povm", "z-basis"]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["probs"] == pytest.approx([1.0, 0.0])
    assert payload["excluded"] == [1]
    assert payload["states"][1] is None


def test_posterior_operation_reads_povm_file(capsys, write_json):
    povm = write_json("povm.json", {"elements": [matrix_to_dict(np.diag([1.0, 0.0])),
                                                 matrix_to_dict(np.diag([0.0, 1.0]))]})
    assert main(["posterior", "--rho", "mixed", "--povm", povm]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["probs"] == pytest.approx([0.5, 0.5])


def test_degenerate_post_selection_exits_1(capsys):
    code = main(["connection-state", "--rho", "ket0", "--effect", "ket1"])
    assert code == EXIT_DOMAIN_ERROR
    captured = capsys.readouterr()
    assert captured.out == ""
    err = error_line(captured.err)
    assert err["error"] == "DegeneratePostSelection"
    assert err["operation"] == "connection-state"
    assert "❌ Error" in captured.err


def test_commutation_gate_exits_1(capsys):
    code = main(["strong-pps", "--rho", "ket0", "--effect", "plus", "--observable", "pauli_y"])
    assert code == EXIT_DOMAIN_ERROR
    assert error_line(capsys.readouterr().err)["error"] == "CommutationRequired"


def test_unknown_preset_exits_2(capsys):
    code = main(["weak-value", "--rho", "ket7", "--effect", "plus", "--observable", "pauli_z"])
    assert code == EXIT_USAGE_ERROR
    assert error_line(capsys.readouterr().err)["error"] == "ConfigError"


def test_invalid_matrix_file_exits_1(capsys, write_json):
    bad = write_json("bad.json", {"dim": 2, "re": [1.0, 0.0, 0.0]})
    assert main(["born-probability", "--rho", bad, "--effect", "plus"]) == EXIT_DOMAIN_ERROR
    assert error_line(capsys.readouterr().err)["error"] == "InvalidMatrix"


# ============================================================================
# USAGE
# ============================================================================

@pytest.mark.parametrize("argv", [
    [],
    ["no-such-command"],
    ["weak-value", "--rho", "ket0"],
    ["uncertainty-scan", "--format", "xml"],
    ["uncertainty-scan", "--workers", "many"],
])
def test_usage_errors_exit_2(capsys, argv):
    assert main(argv) == EXIT_USAGE_ERROR
    assert error_line(capsys.readouterr().err)["error"] == "UsageError"


def test_version_flag(capsys):
    assert main(["--version"]) == EXIT_OK
    assert "ppslab" in capsys.readouterr().out


def test_module_help_subprocess():
    """python -m ppslab --help lists the scenarios."""
    result = subprocess.run(
        [sys.executable, "-m", "ppslab", "--help"],
        capture_output=True,
        text=True
    )
    assert result.returncode == 0
    assert "uncertainty-scan" in result.stdout
    assert "weak-value" in result.stdout


# ============================================================================
# SCENARIOS
# ============================================================================

def test_format_cell():
    assert format_cell(True) == "true"
    assert format_cell(np.bool_(False)) == "false"
    assert format_cell(3) == "3"
    assert format_cell(0.1) == "0.10000000000000001"
    assert float(format_cell(1 / 3)) == 1 / 3


def test_render_table_quotes_text_cells_and_nulls_nan():
    result = ScenarioResult(["label", "value"], [["a,b", 0.5], ['say "hi"', float("nan")]])
    header, rows = read_csv(render_table(result, "csv", "demo"))
    assert header == ["label", "value"]
    assert rows == [["a,b", "0.5"], ['say "hi"', "nan"]]
    payload = json.loads(render_table(result, "json", "demo"))
    assert payload["rows"][1] == {"label": 'say "hi"', "value": None}


def test_small_uncertainty_scan(capsys, write_json, log_file):
    config = write_json("scan.json", {"grid_n": 5})
    assert main(["uncertainty-scan", "--config", config, "--log-file", log_file]) == EXIT_OK
    header, rows = read_csv(capsys.readouterr().out)
    assert header == ["lambda1", "lambda2", "var_sum", "wprime_min_eig", "violates", "w_unusual"]
    assert len(rows) == 25
    corner = rows[0]
    assert float(corner[0]) == -1.0 and float(corner[1]) == -1.0
    assert float(corner[2]) == pytest.approx(0.0, abs=1e-12)
    assert corner[4] == "true"
    center = rows[12]
    assert float(center[2]) == pytest.approx(2.0)
    assert center[4] == "false"


def test_scenario_log_file(capsys, write_json, log_file):
    config = write_json("scan.json", {"grid_n": 3})
    assert main(["uncertainty-scan", "--config", config, "--log-file", log_file]) == EXIT_OK
    text = open(log_file, encoding="utf-8").read()
    assert "PPSLAB SCENARIO: uncertainty-scan" in text
    assert "[SCENARIO_START]" in text
    assert "[SCENARIO_DONE]" in text
    assert "PPSLAB RUN SUMMARY" in text
    assert "Log file" in capsys.readouterr().err


@pytest.mark.slow
def test_default_uncertainty_scan_finishes_within_five_seconds(tmp_path, log_file):
    """The bundled 101 x 101 grid, CSV written to disk, in under five seconds of wall time."""
    out = tmp_path / "scan.csv"
    start = time.perf_counter()
    assert main(["uncertainty-scan", "--out", str(out), "--log-file", log_file]) == EXIT_OK
    assert time.perf_counter() - start < 5.0
    assert out.read_text().count("\n") == 101 * 101 + 1


@pytest.mark.slow
def test_default_uncertainty_scan_covers_the_full_grid(tmp_path, log_file):
    out = tmp_path / "scan.csv"
    assert main(["uncertainty-scan", "--out", str(out), "--log-file", log_file]) == EXIT_OK
    header, rows = read_csv(out.read_text())
    assert len(rows) == 101 * 101
    for row in rows:
        l1, l2, var_sum = float(row[0]), float(row[1]), float(row[2])
        assert abs(var_sum - (2 - l1 ** 2 - l2 ** 2)) <= 1e-12


def test_amplification_scan_json(capsys, log_file):
    assert main(["amplification-scan", "--format", "json", "--log-file", log_file]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["scenario"] == "amplification-scan"
    rows = payload["rows"]
    assert len(rows) == 9
    for row in rows:
        assert row["bound_holds"] is True
        assert abs(row["norm"] * row["overlap"] - 1.0) <= 1e-9


def test_scenario_output_is_deterministic(tmp_path, write_json, log_file):
    """Same config and seed give byte-identical output, whatever the worker count."""
    config = write_json("tomo.json", {"trials": 8, "noise_sigma": 1e-3})
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["tomography-roundtrip", "--config", config, "--seed", "11", "--workers", "1",
                 "--out", str(first), "--log-file", log_file]) == EXIT_OK
    assert main(["tomography-roundtrip", "--config", config, "--seed", "11", "--workers", "4",
                 "--out", str(second), "--log-file", log_file]) == EXIT_OK
    assert first.read_bytes() == second.read_bytes()


def test_seed_override_changes_noisy_output(tmp_path, write_json, log_file):
    config = write_json("tomo.json", {"trials": 3, "noise_sigma": 1e-3})
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["tomography-roundtrip", "--config", config, "--seed", "1", "--out", str(first), "--log-file", log_file])
    main(["tomography-roundtrip", "--config", config, "--seed", "2", "--out", str(second), "--log-file", log_file])
    assert first.read_text() != second.read_text()


def test_noiseless_tomography_roundtrip(capsys, log_file):
    assert main(["tomography-roundtrip", "--log-file", log_file]) == EXIT_OK
    header, rows = read_csv(capsys.readouterr().out)
    assert header[3] == "error"
    assert len(rows) == 20
    assert all(float(row[3]) <= 1e-10 for row in rows)
    assert all(row[6] == "false" for row in rows)


@pytest.mark.parametrize("method", ["exact", "ode"])
def test_dynamics_trace_with_zero_hamiltonian_is_constant(capsys, write_json, log_file, method):
    config = write_json("dyn.json", {
        "schedule": {"segments": [{"t_start": 0.0, "t_end": 1.0, "H": ZERO_H}]},
        "n_times": 6,
        "method": method,
        "dt": 0.05,
    })
    assert main(["dynamics-trace", "--config", config, "--log-file", log_file]) == EXIT_OK
    header, rows = read_csv(capsys.readouterr().out)
    assert header[0] == "t"
    assert len(header) == 9
    assert [float(r[0]) for r in rows] == pytest.approx([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    values = np.array(rows, dtype=float)[:, 1:]
    assert np.allclose(values, values[0], atol=1e-14)
    assert float(rows[0][1]) == pytest.approx(1.0)
    assert float(rows[0][3]) == pytest.approx(1.0)


def test_dynamics_trace_methods_agree(tmp_path, write_json, log_file):
    exact_out, ode_out = tmp_path / "exact.csv", tmp_path / "ode.csv"
    main(["dynamics-trace", "--out", str(exact_out), "--log-file", log_file])
    config = write_json("ode.json", {"method": "ode", "dt": 0.005})
    main(["dynamics-trace", "--config", config, "--out", str(ode_out), "--log-file", log_file])
    _, exact_rows = read_csv(exact_out.read_text())
    _, ode_rows = read_csv(ode_out.read_text())
    exact = np.array(exact_rows, dtype=float)
    ode = np.array(ode_rows, dtype=float)
    assert exact.shape == ode.shape == (21, 9)
    assert np.allclose(exact, ode, atol=1e-8)


@pytest.mark.parametrize("data_path", ["weak", "strong"])
def test_detector_tomography_scenario(capsys, write_json, log_file, data_path):
    config = write_json("det.json", {"data_path": data_path})
    assert main(["detector-tomography", "--config", config, "--log-file", log_file]) == EXIT_OK
    header, rows = read_csv(capsys.readouterr().out)
    row = dict(zip(header, rows[0]))
    assert float(row["post_selection_prob"]) == pytest.approx(0.5)
    assert float(row["trace"]) == pytest.approx(1.0)
    assert row["consistent"] == "true"
    assert float(row["error"]) <= 1e-10
    assert float(row["re_E_0_0"]) == pytest.approx(0.9)


def test_meter_sweep_commuting_readings_agree(capsys, log_file):
    assert main(["meter-sweep", "--log-file", log_file]) == EXIT_OK
    header, rows = read_csv(capsys.readouterr().out)
    assert header[:2] == ["g", "pointer_pps"]
    assert len(rows) == 4
    for row in rows:
        pps, spectral, via_w, via_w_herm = (float(v) for v in row[1:5])
        assert spectral == pytest.approx(pps, abs=1e-10)
        assert via_w == pytest.approx(pps, abs=1e-10)
        assert via_w_herm == pytest.approx(pps, abs=1e-10)


def test_meter_sweep_non_commuting_reports_nan(capsys, write_json, log_file):
    config = write_json("meter.json", {"rho": "ket0", "observable": "pauli_y", "g_values": [0.1]})
    assert main(["meter-sweep", "--config", config, "--log-file", log_file]) == EXIT_OK
    _, rows = read_csv(capsys.readouterr().out)
    assert rows[0][3] == "nan"
    assert np.isfinite(float(rows[0][1]))


def test_meter_sweep_json_writes_missing_readings_as_null(capsys, write_json, log_file):
    config = write_json("meter.json", {"rho": "ket0", "observable": "pauli_y", "g_values": [0.1]})
    assert main(["meter-sweep", "--config", config, "--format", "json", "--log-file", log_file]) == EXIT_OK
    text = capsys.readouterr().out
    assert "NaN" not in text
    row = json.loads(text, parse_constant=lambda name: pytest.fail(f"non-standard JSON constant {name}"))["rows"][0]
    assert row["pointer_connection"] is None
    assert row["pointer_connection_herm"] is None
    assert isinstance(row["pointer_pps"], float)


@pytest.mark.parametrize("params", [
    {"grid_n": 1},
    {"grid_n": "ten"},
])
def test_invalid_scenario_config_exits_2(capsys, write_json, log_file, params):
    config = write_json("bad.json", params)
    assert main(["uncertainty-scan", "--config", config, "--log-file", log_file]) == EXIT_USAGE_ERROR
    err = error_line(capsys.readouterr().err)
    assert err["error"] == "ConfigError"
    assert err["scenario"] == "uncertainty-scan"


def test_oversized_tomography_dimension_exits_2(capsys, write_json, log_file):
    config = write_json("tomo.json", {"dim": 65, "trials": 1})
    assert main(["tomography-roundtrip", "--config", config, "--log-file", log_file]) == EXIT_USAGE_ERROR
    err = error_line(capsys.readouterr().err)
    assert err["error"] == "ConfigError"
    assert "at most 64" in err["message"]


def test_unreadable_config_exits_2(capsys, tmp_path, log_file):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert main(["amplification-scan", "--config", str(broken), "--log-file", log_file]) == EXIT_USAGE_ERROR
    assert main(["amplification-scan", "--config", str(tmp_path / "missing.json"),
                 "--log-file", log_file]) == EXIT_USAGE_ERROR


def test_invalid_schedule_in_config_exits_2(capsys, write_json, log_file):
    config = write_json("dyn.json", {"schedule": {"segments": []}})
    assert main(["dynamics-trace", "--config", config, "--log-file", log_file]) == EXIT_USAGE_ERROR
    assert "schedule has no segments" in error_line(capsys.readouterr().err)["message"]


def test_degenerate_amplification_overlap_exits_2(capsys, write_json, log_file):
    config = write_json("amp.json", {"overlaps": [0.5, 0.0]})
    assert main(["amplification-scan", "--config", config, "--log-file", log_file]) == EXIT_USAGE_ERROR


def test_domain_error_during_scenario_exits_1(capsys, write_json, log_file):
    config = write_json("dyn.json", {"rho": "ket0", "effect": "ket1", "schedule": {
        "segments": [{"t_start": 0.0, "t_end": 1.0, "H": ZERO_H}]}})
    assert main(["dynamics-trace", "--config", config, "--log-file", log_file]) == EXIT_DOMAIN_ERROR
    err = error_line(capsys.readouterr().err)
    assert err["error"] == "DegeneratePostSelection"
    assert "[ERROR]" in open(log_file, encoding="utf-8").read()


def test_unwritable_output_exits_2(capsys, tmp_path, log_file):
    out = tmp_path / "missing-dir" / "out.csv"
    assert main(["amplification-scan", "--out", str(out), "--log-file", log_file]) == EXIT_USAGE_ERROR
