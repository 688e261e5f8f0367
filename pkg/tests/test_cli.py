from __future__ import annotations

import json
import shutil

import pandas as pd
import pytest
import yaml

from harvestmig.cli import STAGES, main

SYNTH = {"output": "w", "synth": {"nx": 5, "ny": 6, "subscribers_per_district": 150, "extra_events": 0.2,
                                  "move_prob_30d": 0.15, "amplitude": 0.06}}


def _fp_csvs(root):
    return sorted(p for p in root.rglob("*.csv") if "ingest/shards" not in str(p))


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = base / "synth.yaml"
    cfg.write_text(yaml.safe_dump(SYNTH))
    assert main(["synth", "--config", str(cfg), "--seed", "1", "--shards", "4"]) == 0
    w = base / "w"
    assert main(["run", "--config", str(w / "run.yaml")]) == 0
    return w


def test_run_writes_markers_and_fingerprints(world):
    out = world / "run"
    for s in STAGES:
        assert (out / ".stages" / f"{s}.done").exists()
    fp = (out / ".stages" / "fit.done").read_text().strip()
    for p in _fp_csvs(out):
        assert p.read_text().startswith(f"# fingerprint={fp}\n"), p
    summary = json.loads((out / "summary.json").read_text())
    assert summary["fingerprint"] == fp


def test_rerun_does_not_recompute(world, capsys):
    npz = world / "run" / "metrics" / "lag30.npz"
    before = npz.stat().st_mtime_ns
    assert main(["run", "--config", str(world / "run.yaml")]) == 0
    assert npz.stat().st_mtime_ns == before
    assert "up to date" in capsys.readouterr().out


def test_stage_from_recomputes_later_stages_only(world):
    out = world / "run"
    npz = (out / "metrics" / "lag30.npz").stat().st_mtime_ns
    panel = out / "panel" / "panel_main_in_rate.csv"
    old = panel.read_bytes()
    panel_t = panel.stat().st_mtime_ns
    assert main(["run", "--config", str(world / "run.yaml"), "--stage-from", "panel"]) == 0
    assert (out / "metrics" / "lag30.npz").stat().st_mtime_ns == npz
    assert panel.stat().st_mtime_ns > panel_t and panel.read_bytes() == old


def test_config_errors_exit_2(world, tmp_path):
    bad = yaml.safe_load((world / "run.yaml").read_text())
    bad["no_such_key"] = 1
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump(bad))
    assert main(["run", "--config", str(p)]) == 2
    missing = yaml.safe_load((world / "run.yaml").read_text())
    missing["inputs"]["ndvi"] = str(world / "nope.csv")
    missing["output"] = str(tmp_path / "out")
    p.write_text(yaml.safe_dump(missing))
    assert main(["run", "--config", str(p)]) == 2
    assert not (tmp_path / "out").exists()
    assert main(["run", "--config", str(tmp_path / "absent.yaml")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == 2


def test_stage_failure_leaves_marker(world, tmp_path):
    w = tmp_path / "w"
    shutil.copytree(world, w, ignore=shutil.ignore_patterns("run"))
    ndvi = pd.read_csv(w / "ndvi.csv")
    ndvi.loc[0, "ndvi"] = 3.0
    ndvi.to_csv(w / "ndvi.csv", index=False)
    assert main(["run", "--config", str(w / "run.yaml")]) == 1
    stages = w / "run" / ".stages"
    assert (stages / "metrics.done").exists() and (stages / "phenology.failed").exists()
    assert not (stages / "phenology.done").exists()
    assert (w / "run" / "metrics" / "lag30.npz").exists()


def test_figures(world):
    assert main(["figures", "--config", str(world / "run.yaml")]) == 0
    fdir = world / "run" / "figures"
    series = pd.read_csv(fdir / "excess_series.csv", comment="#")
    panel = pd.read_csv(world / "run" / "panel" / "panel_main_in_rate.csv", comment="#")
    assert series[series["offset"] == 0]["n_rows"].sum() == len(panel)
    od = pd.read_csv(fdir / "od_matrix.csv", comment="#")
    towers = pd.read_csv(world / "run" / "ingest" / "tower_groups.csv", comment="#")
    with_towers = set(towers["district_id"].dropna())
    assert with_towers <= set(od["destination"]) and with_towers <= set(od["source"])
    coef = pd.read_csv(fdir / "cultivation_coefficients.csv", comment="#")
    assert {"high", "low"} <= set(coef["label"])


def test_totals_zero_coefficient(world):
    assert main(["totals", "--config", str(world / "run.yaml"), "--coefficient", "0"]) == 0
    per = pd.read_csv(world / "run" / "totals" / "totals_district_year.csv", comment="#")
    assert len(per) > 0 and (per["migrants"] == 0).all()


def test_placebo_and_robustness(world):
    assert main(["placebo", "--config", str(world / "run.yaml"), "--R", "3"]) == 0
    s = json.loads((world / "run" / "robustness" / "placebo_summary.json").read_text())
    assert s["iterations"] == 3 and 0 < s["p_value"] <= 1
    assert main(["robustness", "--config", str(world / "run.yaml")]) == 0
    rep = pd.read_csv(world / "run" / "robustness" / "robustness.csv", comment="#")
    assert {"base", "perturbation", "precision", "outcome_variant", "restriction"} <= set(rep["battery"])
