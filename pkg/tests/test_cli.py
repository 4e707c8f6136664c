from __future__ import annotations

import copy
import json

import pytest

from qfbsde.cli import (
    EXIT_CERTIFICATE,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_VALIDATION,
    ConfigError,
    bundled_configs,
    load_config,
    main,
    parse_config,
    run_config,
)


def _write(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return str(p)


def _bundled(name):
    return json.loads(bundled_configs()[name].read_text())


def _unit_model(mode="solve", f="0", g="1"):
    return {
        "mode": mode,
        "model": {"n": 1, "d": 1, "T": 1.0, "b": ["0"], "sigma": [["1"]], "f": [f], "g": [g]},
        "grid": {"box": [[-2.0, 2.0]], "nodes_per_axis": 41},
    }


def test_bundled_configs_present():
    assert set(bundled_configs()) == {"heat-tanh", "cole-hopf", "lq-2player", "hbf-violation", "spanning-demo"}


@pytest.mark.parametrize("name", ["heat-tanh", "cole-hopf", "lq-2player", "hbf-violation", "spanning-demo"])
def test_config_round_trip_is_idempotent(name):
    cfg = load_config(bundled_configs()[name])
    again = parse_config(cfg.to_dict())
    assert again == cfg
    assert parse_config(again.to_dict()).to_dict() == cfg.to_dict()
    assert again.content_hash() == cfg.content_hash()


def test_output_directory_does_not_change_hash():
    a = _bundled("heat-tanh")
    b = copy.deepcopy(a)
    b["output"]["directory"] = "elsewhere"
    assert parse_config(a).content_hash() == parse_config(b).content_hash()
    b["mc"]["seed"] = 12
    assert parse_config(a).content_hash() != parse_config(b).content_hash()


@pytest.mark.parametrize(
    "mutate, path",
    [
        (lambda r: r.update(mode="bogus"), "mode"),
        (lambda r: r.update(extra=1), "config.extra"),
        (lambda r: r["model"].update(g=["z1_1"]), "model.g[0]"),
        (lambda r: r["model"].update(f=["1 +"]), "model.f[0]"),
        (lambda r: r["model"].update(sigma=[["1", "0"]]), "model.sigma[0]"),
        (lambda r: r["grid"].update(nodes_per_axis=4), "grid.nodes_per_axis"),
        (lambda r: r["grid"].update(band=0.7), "grid.band"),
        (lambda r: r.pop("grid"), "grid"),
        (lambda r: r["mc"].pop("seed"), "mc.seed"),
        (lambda r: r["mc"].update(P=1.5), "mc.P"),
        (lambda r: r["schedule"].update(radii=[4, 2]), "schedule.radii"),
        (lambda r: r["structure"].update(spanning_vectors=[[1.0], [2.0, 0.0]]), "structure.spanning_vectors[1]"),
        (lambda r: r["structure"].update(spanning_vectors=[[1.0]]), "structure.spanning_vectors"),
    ],
)
def test_validation_errors_name_the_field(mutate, path):
    raw = _bundled("cole-hopf")
    mutate(raw)
    with pytest.raises(ConfigError) as info:
        parse_config(raw)
    assert info.value.path.startswith(path)


def test_validation_error_exit_code(tmp_path, capsys):
    raw = _unit_model()
    raw["model"]["g"] = ["log("]
    assert main(["solve", "--config", _write(tmp_path, raw), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    assert "model.g[0]" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()
    assert main(["solve", "--config", str(tmp_path / "missing.json")]) == EXIT_VALIDATION
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["solve", "--config", str(bad)]) == EXIT_VALIDATION
    # simulate needs an mc section
    assert main(["simulate", "--config", _write(tmp_path, _unit_model())]) == EXIT_VALIDATION


def test_constant_solution_and_report_only(tmp_path):
    out = tmp_path / "o"
    assert main(["solve", "--config", _write(tmp_path, _unit_model()), "--out", str(out)]) == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == ["report.json"]
    rep = json.loads((out / "report.json").read_text())
    assert rep["status"] == "ok" and rep["exit_code"] == 0
    assert rep["stages"]["solve"]["value_at_start"]["u"] == [1.0]
    assert rep["stages"]["solve"]["residual"]["max"] <= 1e-12
    assert "directory" not in rep["config"]["output"]


def test_field_dump_row_count(tmp_path):
    out = tmp_path / "o"
    assert main(["solve", "--config", _write(tmp_path, _unit_model(g="x1^2")), "--out", str(out), "--dump-fields"]) == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    meta = rep["stages"]["solve"]["field"]
    lines = (out / "fields.csv").read_text().splitlines()
    assert len(lines) - 1 == meta["levels"] * 41


def test_path_dump(tmp_path):
    raw = _unit_model("simulate", g="tanh(x1)")
    raw["mc"] = {"P": 200, "dt_sim": 0.05, "seed": 1}
    out = tmp_path / "o"
    assert main(["simulate", "--config", _write(tmp_path, raw), "--out", str(out), "--dump-paths"]) == EXIT_OK
    lines = (out / "paths.csv").read_text().splitlines()
    assert len(lines) - 1 == 100 * 21


def test_stage_failure_exit_code(tmp_path):
    raw = _unit_model(f="100*y1^2", g="10")
    raw["grid"]["nodes_per_axis"] = 11
    out = tmp_path / "o"
    assert main(["solve", "--config", _write(tmp_path, raw), "--out", str(out)]) == EXIT_NUMERIC
    rep = json.loads((out / "report.json").read_text())
    assert rep["failures"][0]["stage"] == "solve"
    assert rep["failures"][0]["error"] == "NumericalBlowup"


def test_cole_hopf_check_conditions():
    raw = _bundled("cole-hopf")
    raw["mode"] = "check-conditions"
    rep = run_config(parse_config(raw)).as_dict()
    conds = {c["condition"]: c for c in rep["stages"]["check"]["conditions"]}
    assert conds["HQ"]["status"] == "consistent on samples"
    assert conds["HQ"]["fitted_constant"] == pytest.approx(0.5, rel=1e-3)
    assert rep["stages"]["check"]["structure_spanning"]["spans"]


def test_hbf_violation_reports_witness():
    rep = run_config(load_config(bundled_configs()["hbf-violation"])).as_dict()
    conds = {c["condition"]: c for c in rep["stages"]["check"]["conditions"]}
    assert conds["HBF"]["status"] == "falsified"
    assert rep["exit_code"] == 0


def test_spanning_demo_verdicts():
    rep = run_config(load_config(bundled_configs()["spanning-demo"])).as_dict()
    assert [s["spans"] for s in rep["stages"]["check"]["spanning"]] == [True, False, True]


@pytest.fixture(scope="module")
def lq_cli_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("lq")
    code = main(["verify-nash", "--config", "lq-2player", "--out", str(out)])
    return code, json.loads((out / "report.json").read_text())


def test_bundled_lq_certifies(lq_cli_run):
    code, rep = lq_cli_run
    assert code == EXIT_OK and rep["certified"] is True
    cert = rep["stages"]["nash"]["certificate"]
    assert max(cert["gaps"]) <= 1e-2


def test_failed_certificate_still_writes_report(tmp_path):
    raw = _bundled("lq-2player")
    # player 2 announces a_hat = 0, which does not maximise its Hamiltonian
    raw["game"]["players"][1]["a_hat"] = ["0"]
    raw["grid"]["nodes_per_axis"] = 121
    raw["mc"]["P"] = 500
    raw["nash"]["resolution"] = 21
    out = tmp_path / "o"
    code = main(["verify-nash", "--config", _write(tmp_path, raw), "--out", str(out)])
    rep = json.loads((out / "report.json").read_text())
    assert code == EXIT_CERTIFICATE
    assert rep["certified"] is False and rep["status"] == "certificate failed"


def test_seed_override_and_threads_env(tmp_path, monkeypatch):
    raw = _unit_model("simulate", g="tanh(x1)")
    raw["mc"] = {"P": 300, "dt_sim": 0.05, "seed": 1}
    cfg = _write(tmp_path, raw)
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "5"])
    monkeypatch.setenv("FBSDE_THREADS", "3")
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"])
    a = (tmp_path / "a" / "report.json").read_text()
    assert a == (tmp_path / "b" / "report.json").read_text()
    assert json.loads(a)["config"]["mc"]["seed"] == 5
