import csv
import json
import logging
import math

import pytest

from kamres.cli import UsageError, csv_text, load_config, main

POT_1D = {"n": 1, "s": 1.0, "modes": [{"k": [1], "re": -0.5, "im": 0.0}]}
POT_2D = {"n": 2, "s": 1.0, "modes": [
    {"k": [0, 1], "re": math.exp(-1)}, {"k": [1, 0], "re": 0.1 * math.exp(-1)},
    {"k": [1, 1], "re": 0.1 * math.exp(-2)}, {"k": [0, 2], "re": 0.3 * math.exp(-2)}]}


def run(tmp_path, cfg, *extra, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    out = tmp_path / "out"
    code = main(["--config", str(path), "--out", str(out), *extra])
    return code, out


def summary(out, sub):
    return json.loads((out / f"{sub}.json").read_text())


def rows(out, sub):
    with open(out / f"{sub}.csv", newline="") as fh:
        return list(csv.DictReader(fh))


# ---- config handling ----------------------------------------------------------------

def test_defaults_filled():
    cfg = load_config(data={"subcommand": "kam-budget", "params": {"n": 3}})
    assert cfg.seed == 0 and cfg.workers == 1 and cfg.format == "both"
    assert cfg.get("nu") == 5
    assert cfg.get("theta") == cfg.get("mu") == 1e-2
    assert cfg.get("samples") == 100000
    assert cfg.get("tol") == 1e-10


def test_negative_tolerance_names_field():
    with pytest.raises(UsageError, match="params.tol"):
        load_config(data={"subcommand": "twist-scan", "params": {"tol": -1e-9}})
    with pytest.raises(UsageError, match="params.symplectic_tol"):
        load_config(data={"subcommand": "twist-scan", "params": {"symplectic_tol": 0}})


def test_all_bad_fields_reported_together():
    with pytest.raises(UsageError) as e:
        load_config(data={"subcommand": "kam-budget", "seed": -1, "workers": 0,
                          "params": {"epsilon": -1}})
    msg = str(e.value)
    assert "seed" in msg and "workers" in msg and "params.epsilon" in msg


def test_precedence_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="kamres"):
        cfg = load_config(data={"subcommand": "resonance-atlas",
                                "params": {"epsilon": 1e-6, "K": 5, "Kbig": 10,
                                           "alpha": 0.02}})
    assert cfg.get("zone_mode") == "decoupled"
    assert any("precedence" in r.message for r in caplog.records)


def test_usage_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{bad")
    assert main(["--config", str(bad)]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["--config", str(tmp_path / "missing.json")]) == 1
    code, _ = run(tmp_path, {"subcommand": "twist-scan", "format": "xml"})
    assert code == 1
    assert "format" in capsys.readouterr().err


def test_header_only_csv():
    assert csv_text(["a", "b"], []) == "a,b\n"


# ---- subcommands --------------------------------------------------------------------

def test_twist_scan(tmp_path):
    code, out = run(tmp_path, {"subcommand": "twist-scan", "params": {"n": 3, "count": 40},
                               "seed": 1})
    assert code == 0
    s = summary(out, "twist-scan")
    assert s["passed"] and s["result"]["mismatches"] == 0
    assert s["result"]["reference"]["m_n"] == 18
    assert len(rows(out, "twist-scan")) == 40


def test_reruns_byte_identical(tmp_path):
    cfg = {"subcommand": "resonance-atlas",
           "params": {"n": 2, "K": 5, "Kbig": 10, "alpha": 0.02, "samples": 3000}, "seed": 3}
    code, out = run(tmp_path, cfg)
    assert code == 0
    first = [(out / f).read_bytes() for f in ("resonance-atlas.json", "resonance-atlas.csv")]
    code, out = run(tmp_path, cfg)
    second = [(out / f).read_bytes() for f in ("resonance-atlas.json", "resonance-atlas.csv")]
    assert first == second


def test_format_selection(tmp_path):
    code, out = run(tmp_path, {"subcommand": "kam-budget", "format": "json",
                               "params": {"epsilons": [1e-40, 1e-60]}})
    assert code == 0
    assert (out / "kam-budget.json").exists() and not (out / "kam-budget.csv").exists()


def test_env_output_directory(tmp_path, monkeypatch):
    monkeypatch.setenv("KAMRES_OUT", str(tmp_path / "env_out"))
    cfgp = tmp_path / "c.json"
    cfgp.write_text(json.dumps({"subcommand": "twist-scan", "params": {"count": 5}}))
    assert main(["--config", str(cfgp)]) == 0
    assert (tmp_path / "env_out" / "twist-scan.json").exists()


def test_cli_flags_override_config(tmp_path):
    code, out = run(tmp_path, {"subcommand": "twist-scan", "params": {"count": 5}, "seed": 1},
                    "--seed", "9")
    assert summary(out, "twist-scan")["config"]["seed"] == 9


def test_kam_budget(tmp_path):
    code, out = run(tmp_path, {"subcommand": "kam-budget",
                               "params": {"epsilons": [1e-40, 1e-60, 1e-80]}})
    assert code == 0
    r = rows(out, "kam-budget")
    totals = [float(x["log_total"]) for x in r]
    assert totals[0] > totals[1] > totals[2]


def test_action_profile_with_separatrix(tmp_path):
    (tmp_path / "pot.json").write_text(json.dumps(POT_1D))
    code, out = run(tmp_path, {"subcommand": "action-profile", "potential": "pot.json"})
    assert code == 0
    r = rows(out, "action-profile")
    assert any(x["kind"] == "separatrix" for x in r)
    edge = [x for x in r if x["kind"] == "separatrix" and x["branch"] == "2"]
    assert float(edge[0]["P"]) == pytest.approx(2 * math.sqrt(2) / math.pi, abs=1e-12)


def test_check_potential(tmp_path):
    code, out = run(tmp_path, {"subcommand": "check-potential", "potential":
                               {"example": {"n": 2, "s": 1, "delta": 0.1, "radius": 12}},
                               "params": {"delta": 0.1}})
    assert code == 0
    assert summary(out, "check-potential")["passed"]


def test_normal_form(tmp_path):
    code, out = run(tmp_path, {"subcommand": "normal-form", "potential": POT_2D,
                               "params": {"k": [0, 1], "epsilon": 1e-6,
                                          "domain": [[0.5, -0.01], [0.8, 0.01]], "r": 0.1,
                                          "cutoff": 2}})
    assert code == 0


def test_failing_check_exits_two(tmp_path):
    # a non-generic potential: the (3, 4) mode is missing
    pot = {"n": 2, "s": 1.0, "modes": [{"k": [1, 0], "re": 0.1}]}
    code, out = run(tmp_path, {"subcommand": "check-potential", "potential": pot,
                               "params": {"delta": 0.1}})
    assert code == 2
    assert not summary(out, "check-potential")["passed"]


def test_missing_required_param(tmp_path):
    code, _ = run(tmp_path, {"subcommand": "normal-form", "potential": POT_2D,
                             "params": {"k": [0, 1]}})
    assert code == 1


def test_structure_pipeline_small(tmp_path):
    code, out = run(tmp_path, {"subcommand": "structure-pipeline", "potential": POT_2D,
                               "params": {"k": [0, 1], "epsilon": 1e-6,
                                          "domain": [[0.5, -0.01], [0.8, 0.01]], "r": 0.1,
                                          "cutoff": 2, "theta": 0.01, "grid_hat": 1,
                                          "grid_act": 3, "angles": 8, "branches": [1]}})
    assert code == 0
    s = summary(out, "structure-pipeline")["result"]
    assert s["branches"][0]["symplectic_defect"] <= 1e-7
    assert s["cippa"] <= 1e-10
