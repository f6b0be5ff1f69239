import filecmp
import hashlib
import json
from dataclasses import replace
from pathlib import Path

import pandas as pd
import pytest

from pfsnap.cli import main
from pfsnap.errors import StageError
from pfsnap.panel_store import load_panel
from pfsnap.pipeline import (
    STAGES,
    PipelineConfig,
    config_hash,
    load_config,
    run_pipeline,
    run_stage,
    write_config,
)
from pfsnap.regress import read_fit_csv
from pfsnap.spi import POLICIES, SIGNS

REPORT = [
    "pfs.csv",
    "spi.csv",
    "estimates_ols.csv",
    "estimates_2sls.csv",
    "estimates_interaction.csv",
    "estimates_threestep.csv",
    "quantile_profile.csv",
    "diagnostics.csv",
    "manifest.json",
]


def same_tree(a: Path, b: Path) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(same_tree(a / d, b / d) for d in cmp.common_dirs)


def cli(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--seed", "7", "--individuals", "250", "--out", str(root / "b")]) == 0
    return root / "b"


@pytest.fixture(scope="module")
def first_run(bundle):
    cfg = load_config(bundle / "config.ini")
    return cfg, run_pipeline(cfg)


def test_simulate_twice_identical(tmp_path, capsys):
    for name in ("x", "y"):
        code, out, _ = cli(capsys, "simulate", "--seed", "7", "--individuals", "40", "--out", tmp_path / name)
        assert code == 0 and json.loads(out)["status"] == "ok"
    assert same_tree(tmp_path / "x", tmp_path / "y")


def test_full_report(first_run, bundle):
    cfg, report = first_run
    assert set(REPORT) <= set(report.files)
    manifest = json.loads((report.out / "manifest.json").read_text())
    for key, path in cfg.input_paths().items():
        assert manifest["inputs"][key]["sha256"] == hashlib.sha256(Path(path).read_bytes()).hexdigest()
    assert manifest["config_sha256"] == config_hash(cfg)
    assert str(bundle) not in json.dumps(manifest)
    for name, digest in manifest["outputs"].items():
        assert hashlib.sha256((report.out / name).read_bytes()).hexdigest() == digest
    assert all(b"\r\n" not in (report.out / f).read_bytes() for f in report.files)


def test_rerun_is_byte_identical(first_run, tmp_path):
    cfg, report = first_run
    again = run_pipeline(replace(cfg, out=str(tmp_path / "again")))
    assert same_tree(report.out, again.out)


def test_staged_cli_matches_run(first_run, bundle, tmp_path, capsys):
    _, report = first_run
    out = tmp_path / "staged"
    for stage in STAGES:
        code, text, err = cli(capsys, stage, "--config", bundle / "config.ini", "--out", out)
        assert code == 0, err
        assert json.loads(text)["command"] == stage
    assert same_tree(report.out, out)


def test_tables_round_trip(first_run):
    cfg, report = first_run
    clean = load_panel(report.out / "panel_clean.csv")
    assert clean.violations == [] and len(clean) == len(load_panel(cfg.panel))
    for name in ("ols", "2sls", "interaction", "threestep"):
        table, diag = read_fit_csv(report.out / f"estimates_{name}.csv")
        assert "snap" in set(table.name)
        assert diag["n_obs"] > 0 and "mean_outcome" in diag or name == "ols"
        if name != "ols":
            assert diag["kp_f"] >= 0
    raw = (report.out / "pfs.csv").read_text()
    pfs = pd.read_csv(report.out / "pfs.csv")
    assert pfs.to_csv(index=False, lineterminator="\n", float_format="%.12g") == raw
    prof = pd.read_csv(report.out / "quantile_profile.csv")
    assert list(prof.columns) == ["tau", "estimate", "se", "ci_low", "ci_high"]
    assert prof.tau.tolist() == list(cfg.taus)


def test_weighting_toggle_changes_estimates(first_run, tmp_path):
    cfg, report = first_run
    alt = run_pipeline(replace(cfg, weights="none", out=str(tmp_path / "nw")))
    for name in ("ols", "2sls"):
        a = (report.out / f"estimates_{name}.csv").read_bytes()
        b = (alt.out / f"estimates_{name}.csv").read_bytes()
        assert a != b
    # inputs that weights never touch are unchanged
    assert (report.out / "spi.csv").read_bytes() == (alt.out / "spi.csv").read_bytes()


def test_unit_weights_make_modes_identical(bundle, tmp_path):
    panel = pd.read_csv(bundle / "panel.csv", dtype=str, keep_default_na=False)
    panel["weight"] = "1"
    unit = tmp_path / "panel_unit.csv"
    panel.to_csv(unit, index=False, lineterminator="\n")
    cfg = load_config(bundle / "config.ini", panel=str(unit))
    a = run_pipeline(replace(cfg, out=str(tmp_path / "survey")))
    b = run_pipeline(replace(cfg, weights="none", out=str(tmp_path / "none")))
    for name in ("pfs.csv", "estimates_ols.csv", "estimates_2sls.csv", "estimates_interaction.csv",
                 "estimates_threestep.csv", "quantile_profile.csv"):
        assert (a.out / name).read_bytes() == (b.out / name).read_bytes(), name


def test_variants_run(first_run, tmp_path):
    cfg, report = first_run
    mund = run_pipeline(replace(cfg, fe="mundlak", out=str(tmp_path / "m")))
    unw = run_pipeline(replace(cfg, spi="unweighted", out=str(tmp_path / "u")))
    for alt in (mund, unw):
        assert (alt.out / "estimates_2sls.csv").read_bytes() != (report.out / "estimates_2sls.csv").read_bytes()


def test_missing_prevalence_names_calibration(bundle, tmp_path, capsys):
    cfg = load_config(bundle / "config.ini")
    stripped = replace(cfg, prevalence=None, out=str(tmp_path / "r"))
    write_config(stripped, bundle / "noprev.ini")
    code, _, err = cli(capsys, "run", "--config", bundle / "noprev.ini")
    assert code == 1
    payload = json.loads(err)
    assert payload["status"] == "error" and payload["stage"] == "pfs/calibration"
    code, _, err = cli(capsys, "pfs", "--config", bundle / "config.ini", "--out", tmp_path / "r",
                       "--prevalence", tmp_path / "does_not_exist.csv")
    assert code == 1 and json.loads(err)["stage"] == "pfs/calibration"


def test_estimate_needs_prior_stages(bundle, tmp_path, capsys):
    code, out, err = cli(capsys, "estimate", "--config", bundle / "config.ini", "--out", tmp_path / "empty")
    assert code == 1 and out == ""
    payload = json.loads(err)
    assert payload["stage"] == "estimate" and "panel_clean.csv" in payload["message"]
    with pytest.raises(StageError) as info:
        run_stage(load_config(bundle / "config.ini", out=str(tmp_path / "empty2")), "quantile")
    assert info.value.stage == "quantile"


def test_spi_subcommand_endpoints(tmp_path, capsys):
    rows = []
    for state, generous in (("G", True), ("R", False)):
        rec = {"state_id": state, "year": 2001}
        for p in POLICIES:
            on = (SIGNS[p] > 0) == generous and p != "vehicle_exempt_all"
            rec[p] = 1 if on else 0
        rows.append(rec)
    policy = tmp_path / "policy.csv"
    pd.DataFrame(rows).to_csv(policy, index=False, lineterminator="\n")
    code, _, err = cli(capsys, "spi", "--policy", policy, "--out", tmp_path / "o")
    assert code == 0, err
    spi = pd.read_csv(tmp_path / "o" / "spi.csv").set_index("state_id")
    assert spi.loc["G", "spi_unweighted"] == 10 and spi.loc["R", "spi_unweighted"] == 1
    assert spi.loc["G", "spi_weighted"] == 10 and spi.loc["R", "spi_weighted"] == 1


def test_bad_policy_record_is_stage_error(tmp_path, capsys):
    policy = tmp_path / "policy.csv"
    rec = {"state_id": "X", "year": 2001, **{p: 0 for p in POLICIES}, "vehicle_exempt_some": 1, "vehicle_exempt_all": 1}
    pd.DataFrame([rec]).to_csv(policy, index=False)
    code, _, err = cli(capsys, "spi", "--policy", policy, "--out", tmp_path / "o")
    assert code == 1 and json.loads(err)["stage"] == "spi"


def test_config_round_trip_and_validation(bundle, tmp_path):
    cfg = load_config(bundle / "config.ini", seed=3, weights="none", fe="mundlak")
    write_config(cfg, tmp_path / "c.ini")
    back = load_config(tmp_path / "c.ini")
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)
    with pytest.raises(ValueError):
        PipelineConfig(panel="a.csv", policy="a.csv")
    with pytest.raises(ValueError):
        PipelineConfig(panel="a.csv", out="a.csv")
    with pytest.raises(ValueError):
        PipelineConfig(weights="both")
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.ini")


def test_cli_missing_config_is_json_error(tmp_path, capsys):
    code, _, err = cli(capsys, "run", "--config", tmp_path / "nope.ini")
    assert code == 1 and json.loads(err)["error"] == "FileNotFoundError"
