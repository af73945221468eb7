import csv
import io
import json

import pytest

from heraldsim.cli import CSV_COLUMNS, RunConfig, run
from heraldsim.errors import ConfigurationError


def invoke(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run(list(argv), stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def values(text, experiment=None):
    return [float(r["value"]) for r in rows(text) if experiment is None or r["experiment"] == experiment]


def test_pair_defaults():
    code, out, _ = invoke("pair")
    assert code == 0
    table = {r["experiment"]: float(r["value"]) for r in rows(out)}
    assert table["fidelity"] >= 0.999
    assert table["success"] == 1
    assert list(rows(out)[0]) == list(CSV_COLUMNS)


def test_pair_total_loss_is_a_warning():
    code, out, err = invoke("pair", "--eta", "1")
    assert code == 0
    table = {r["experiment"]: float(r["value"]) for r in rows(out)}
    assert table["herald_probability"] == 0 and table["success"] == 0
    assert "warning" in err


def test_malformed_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert invoke("ghz", "--config", str(bad))[0] == 2
    bad.write_text(json.dumps({"shots": 10, "colour": "red"}))
    code, _, err = invoke("ghz", "--config", str(bad))
    assert code == 2 and "colour" in err
    bad.write_text(json.dumps({"p_c": 0.5}))
    assert invoke("ghz", "--config", str(bad))[0] == 2


def test_invalid_config_writes_nothing(tmp_path):
    target = tmp_path / "out.csv"
    code, _, _ = invoke("ghz", "--eta", "2", "--out", str(target))
    assert code == 2
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []


def test_ghz_exact():
    code, out, _ = invoke("ghz")
    assert code == 0
    assert values(out, "correlation") == pytest.approx([-1, -1, -1, 1], abs=1e-9)
    assert values(out, "lhv_xxx_prediction") == pytest.approx([-1])


def test_ghz_monte_carlo_within_statistics():
    code, out, _ = invoke("ghz", "--engine", "montecarlo", "--shots", "20000", "--seed", "1")
    assert code == 0
    for r in rows(out):
        if r["experiment"] == "correlation":
            exact = 1.0 if r["settings"] == "XXX" else -1.0
            assert abs(float(r["value"]) - exact) <= 5 * float(r["stderr"]) + 1e-12


def test_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["ghz", "--engine", "montecarlo", "--shots", "3000", "--seed", "9", "--eta", "0.1"]
    assert invoke(*args, "--out", str(a), "--workers", "1")[0] == 0
    assert invoke(*args, "--out", str(b), "--workers", "3")[0] == 0
    assert a.read_bytes() == b.read_bytes()


def test_w_flag_treatments():
    expected = {"abstract": [1, 1, 1, 0.75], "trace": [1, 0.5, 0.5, 0.25], "erase": [1, 1, 1, 0.75]}
    for flag, want in expected.items():
        code, out, err = invoke("w", "--flag-treatment", flag)
        assert code == 0
        assert values(out) == pytest.approx(want, abs=1e-9)
        assert ("which-path" in err) == (flag == "trace")


def test_mermin_commands():
    code, out, _ = invoke("mermin", "--protocol", "w", "--a", "Z", "--b", "X", "--engine", "abstract")
    assert code == 0
    assert values(out, "mermin_value") == pytest.approx([-3], abs=1e-9)
    assert values(out, "violated") == [1]
    code, out, _ = invoke("mermin", "--protocol", "ghz", "--a", "X", "--b", "Y")
    assert values(out, "mermin_value") == pytest.approx([4], abs=1e-9)
    code, out, _ = invoke("mermin", "--protocol", "product")
    assert abs(values(out, "mermin_value")[0]) <= 2 + 1e-9
    assert values(out, "violated") == [0]


def test_mermin_z_on_ghz_is_a_usage_error():
    assert invoke("mermin", "--protocol", "ghz", "--a", "Z", "--b", "X")[0] == 2


def test_timing_rows():
    code, out, _ = invoke("timing", "--protocol", "ghz", "--eta", "0.5", "--shots", "500")
    table = {r["experiment"]: float(r["value"]) for r in rows(out)}
    assert table["formula_time"] == 32.0
    assert table["success_probability"] == pytest.approx(1 / 32)
    code, out, err = invoke("timing", "--protocol", "w", "--t1", "2", "--shots", "200")
    table = {r["experiment"]: float(r["value"]) for r in rows(out)}
    assert table["formula_time"] == 8.0
    assert table["success_probability"] == pytest.approx(0.125)
    assert "rounds" in err


def test_timing_total_loss_is_a_usage_error():
    assert invoke("timing", "--protocol", "ghz", "--eta", "1")[0] == 2


def test_attempt_cap_exits_3(tmp_path):
    cfg = tmp_path / "cap.json"
    cfg.write_text(json.dumps({"protocol": "ghz", "attempt_cap": 1, "eta": 0.9, "shots": 20}))
    assert invoke("timing", "--config", str(cfg))[0] == 3


def test_json_report_reproduces_from_echoed_config(tmp_path):
    code, out, _ = invoke("ghz", "--engine", "montecarlo", "--shots", "500", "--seed", "4", "--format", "json")
    report = json.loads(out)
    cfg = tmp_path / "echo.json"
    cfg.write_text(json.dumps(report["config"]))
    again = json.loads(invoke("ghz", "--config", str(cfg), "--format", "json")[1])
    assert again["rows"] == report["rows"]
    assert {r["config_hash"] for r in report["rows"]} == {report["config_hash"]}


def test_flags_override_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "engine": "montecarlo", "shots": 100}))
    _, a, _ = invoke("ghz", "--config", str(cfg), "--seed", "2", "--format", "json")
    assert json.loads(a)["config"]["seed"] == 2


def test_config_hash_is_canonical():
    a = RunConfig(eta=0, phases=[0, 0, 0])
    b = RunConfig(eta=0.0, phases=[0.0, 0.0, 0.0])
    assert a.hash() == b.hash()
    assert a.hash() != RunConfig(eta=0.1).hash()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigurationError):
        RunConfig.from_mapping({"shots": 1, "nope": 2})


def test_command_protocol_mismatch():
    assert invoke("ghz", "--protocol", "w")[0] == 2


def test_twelve_significant_digits():
    _, out, _ = invoke("pair")
    fid = [r["value"] for r in rows(out) if r["experiment"] == "fidelity"][0]
    assert fid == "0.999000999001"
