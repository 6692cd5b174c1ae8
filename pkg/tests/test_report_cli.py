import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rsl import __version__
from rsl.cli import run
from rsl.report import ReportIOError, SCHEMA, csv_text, dumps, emit_report, fmt_float

from _helpers import config_path


def report(out):
    with open(os.path.join(out, "report.json"), "rb") as fh:
        return fh.read()


def parsed(out):
    return json.loads(report(out))


# report format ------------------------------------------------------------------


def test_empty_report_is_minimal_json():
    text = dumps({})
    assert json.loads(text) == {"schema": SCHEMA}


def test_schema_first_and_order_kept():
    text = dumps({"b": 1, "a": [1.5, float("inf"), float("nan")], "schema": "ignored"})
    assert text.index('"schema"') < text.index('"b"') < text.index('"a"')
    data = json.loads(text)
    assert data["schema"] == SCHEMA and data["a"] == [1.5, "inf", "nan"]


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_floats_round_trip(x):
    assert float(fmt_float(x)) == x
    assert json.loads(dumps({"x": x}))["x"] == x


def test_emit_report_byte_identical(tmp_path):
    res = {"v": np.array([0.1, 2.0 / 3.0]), "n": np.int64(3), "ok": np.bool_(True)}
    a = emit_report(res, str(tmp_path / "a"))
    b = emit_report(res, str(tmp_path / "b"))
    assert open(a, "rb").read() == open(b, "rb").read()


def test_emit_report_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ReportIOError):
        emit_report({}, str(blocker))


def test_csv_text():
    assert csv_text(["a", "b"], [[1, 0.1], [None, "x"]]) == "a,b\n1,0.10000000000000001\n,x\n"


# command line -----------------------------------------------------------------


def test_version(capsys):
    assert run(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_check_gbm(tmp_path):
    out = str(tmp_path)
    assert run(["check", "--model", config_path("gbm_interval.toml"), "--output", out]) == 0
    r = parsed(out)
    assert r["schema"] == SCHEMA and r["pass"] is True
    assert r["mpr"]["global_bound"] == 0.25


def test_check_remark_exit_2(tmp_path):
    out = str(tmp_path)
    assert run(["check", "--model", config_path("remark_2_10.toml"), "--output", out]) == 2
    r = parsed(out)
    assert r["mpr"]["divergent"] is True and r["pass"] is False


def test_builtin_family_name(tmp_path):
    assert run(["check", "--model", "delay", "--output", str(tmp_path)]) == 0


def test_usage_and_io_errors(tmp_path):
    assert run(["frobnicate"]) == 1
    assert run(["check", "--model", str(tmp_path / "missing.toml"), "--output", str(tmp_path)]) == 1
    assert run(["check", "--output", str(tmp_path)]) == 1
    assert run(["check", "--model", "gbm_interval", "--threads", "0", "--output", str(tmp_path)]) == 1
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["check", "--model", "gbm_interval", "--output", str(blocker)]) == 1


def test_engine_error_recorded(tmp_path):
    out = str(tmp_path)
    code = run(["value", "--model", config_path("remark_2_10.toml"), "--steps", "4", "--output", out])
    assert code == 2
    assert parsed(out)["error"]["type"] == "NotApplicable"


def test_two_engine_sections_rejected(tmp_path):
    cfg = tmp_path / "exp.toml"
    cfg.write_text('command = "check"\n[check]\nbudget = 500\n[simulate]\npaths = 10\n')
    assert run(["check", "--model", "gbm_interval", "--config", str(cfg), "--output", str(tmp_path)]) == 1


SIM = ["simulate", "--model", config_path("gbm_interval.toml"), "--paths", "3000", "--steps", "16",
       "--selector", "constant:f=0.1,0.04"]


def test_simulate_deterministic(tmp_path):
    a, b, c = (str(tmp_path / k) for k in "abc")
    assert run(SIM + ["--output", a]) == 0
    assert run(SIM + ["--output", b]) == 0
    assert run(SIM + ["--output", c, "--threads", "8"]) == 0
    assert report(a) == report(b) == report(c)


def test_simulate_se_scaling(tmp_path):
    base = ["simulate", "--model", config_path("gbm_interval.toml"), "--steps", "8",
            "--selector", "constant:f=0.1,0.04"]
    ses = []
    for n in (20000, 40000):
        out = str(tmp_path / str(n))
        assert run(base + ["--paths", str(n), "--output", out]) == 0
        ses.append(parsed(out)["se_z"])
    assert ses[1] / ses[0] == pytest.approx(1 / math.sqrt(2), rel=0.05)


def test_simulate_dump_csv(tmp_path):
    out = str(tmp_path)
    assert run(SIM[:3] + ["--paths", "500", "--steps", "2", "--dump", "--output", out]) == 0
    lines = open(os.path.join(out, "paths.csv")).read().splitlines()
    assert lines[0] == "path_id,t,X_1,logZ" and len(lines) == 1 + 500 * 3
    assert lines[1].split(",")[1:] == ["0", "1", "0"]


def test_dump_config_round_trip(tmp_path, capsys):
    direct, via = str(tmp_path / "direct"), str(tmp_path / "via")
    assert run(SIM + ["--seed", "9", "--dump-config"]) == 0
    cfg = tmp_path / "exp.toml"
    cfg.write_text(capsys.readouterr().out)
    assert run(SIM + ["--seed", "9", "--output", direct]) == 0
    assert run(["simulate", "--config", str(cfg), "--output", via]) == 0
    assert report(direct) == report(via)


def test_output_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("RSL_OUTPUT_DIR", str(tmp_path / "env"))
    assert run(["check", "--model", "gbm_interval"]) == 0
    assert os.path.exists(tmp_path / "env" / "report.json")


def test_superhedge_cli(tmp_path):
    out = str(tmp_path)
    args = ["superhedge", "--model", config_path("vol_interval.toml"), "--steps", "8", "--verify-paths", "500",
            "--output", out]
    assert run(args) == 0
    r = parsed(out)
    assert r["verify"]["exhaustive_paths"] == 3**8 and r["verify"]["exhaustive_violations"] == 0
    header = open(os.path.join(out, "surface.csv")).readline().strip()
    assert header == "t,state,wealth,value,H,f_adversary"


def test_duality_single_model(tmp_path):
    out = str(tmp_path)
    args = ["duality", "--model", config_path("single_model.toml"), "--utility", "log", "--steps", "16",
            "--grid-points", "9", "--output", out]
    assert run(args) == 0
    r = parsed(out)
    assert r["conjugacy"]["pass"] and r["conjugacy"]["gap_u"] <= r["conjugacy"]["tolerance"]
    for name in ("primal_conjugacy.csv", "dual_conjugacy.csv"):
        assert os.path.exists(os.path.join(out, name))


def test_value_cli(tmp_path):
    out = str(tmp_path)
    args = ["value", "--model", "gbm_interval", "--steps", "8", "--wealth-nodes", "41", "--fraction-nodes", "41",
            "--x", "1,2", "--y", "1", "--output", out]
    assert run(args) == 0
    r = parsed(out)
    assert len(r["u"]) == 2 and len(r["v"]) == 1 and r["shape_u"]["passes"]
