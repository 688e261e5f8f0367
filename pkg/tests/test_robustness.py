from __future__ import annotations

import dataclasses

import numpy as np
import pandas as pd
import pytest

from harvestmig.econometrics import SpecError
from harvestmig.panel import PanelConfig, preset
from harvestmig.robustness import (PerturbationError, battery_frame, fit_panel, perturbation_battery,
                                   perturbed_peaks, placebo_battery, placebo_peaks, precision_split, restrict,
                                   restriction_battery, result_rows)


def test_placebo_single_iteration_is_deterministic(small_world):
    _, b, peaks = small_world
    a = placebo_battery(b, peaks, R=1, master_seed=7)
    c = placebo_battery(b, peaks, R=1, master_seed=7)
    assert a.coefficients.tolist() == c.coefficients.tolist()
    assert a.runs[0].seed == (7, 1)
    assert placebo_peaks(peaks, 7, 1).equals(placebo_peaks(peaks, 7, 1))
    assert not placebo_peaks(peaks, 7, 1).equals(placebo_peaks(peaks, 7, 2))
    assert placebo_peaks(peaks, 7, 1)["period"].between(1, 12).all()


def test_placebo_p_value_formula(small_world):
    _, b, peaks = small_world
    res = placebo_battery(b, peaks, R=5, master_seed=3)
    assert res.p_value == pytest.approx((1 + res.n_at_least) / (len(res.coefficients) + 1))
    assert len(res.frame()) == 5 and res.summary()["iterations"] == 5
    with pytest.raises(ValueError):
        placebo_battery(b, peaks, R=0)


def test_zero_shift_equals_base_fit(small_world):
    _, b, peaks = small_world
    base = fit_panel(b.build(peaks)).get("high")
    shifted = perturbation_battery(b, peaks, shifts=(0,))[0].get("high")
    assert shifted.estimate == base.estimate and shifted.se == base.se


def test_large_shift_rejected(small_world):
    _, _, peaks = small_world
    with pytest.raises(PerturbationError):
        perturbed_peaks(peaks, 200)
    out = perturbed_peaks(peaks, -14)
    assert (pd.to_datetime(out["t0"]) - pd.to_datetime(peaks["t0"])).dt.days.max() <= 0


def test_precision_split(small_world):
    _, b, peaks = small_world
    panel = b.build(peaks)
    everything = precision_split(panel, threshold=0.0)
    assert everything.minority is None and everything.skipped == ["minority: empty subsample"]
    full = fit_panel(panel)
    assert everything.majority.get("high").estimate == pytest.approx(full.get("high").estimate)
    # the split is strict: a share equal to the threshold goes to the minority
    t = float(panel.frame["majority_share"].iloc[0])
    split = precision_split(panel, threshold=t)
    assert split.n_majority == int((panel.frame["majority_share"] > t).sum())
    assert split.n_majority + split.n_minority == panel.n


def test_single_year_restriction_drops_year_effect(small_world):
    _, b, peaks = small_world
    panel = b.build(peaks)
    rows = restriction_battery(panel, specs=("eq2",), violence_variants=())
    by = {r.variant: r for r in rows}
    one_year = by["drop_2015"]
    assert one_year.status == "ok" and not any(n.startswith("year[") for n in one_year.result.fit.names)
    assert one_year.n == int((panel.frame["year"] == 2016).sum())
    with pytest.raises(SpecError):
        restrict(panel.frame, np.zeros(panel.n, bool))


def test_presets_use_their_lag(small_world):
    _, b, peaks = small_world
    for name in ("tabS1_c2", "tabS1_c3", "tabS1_c4", "tabS1_c5"):
        panel = b.build(peaks, preset(name))
        assert panel.config == preset(name) and panel.n > 0
    with pytest.raises(Exception):
        b.build(peaks, dataclasses.replace(PanelConfig(), lag=60))


def test_report_rows(small_world):
    _, b, peaks = small_world
    res = fit_panel(b.build(peaks))
    frame = battery_frame(result_rows("base", "main", res, res.fit.n) + result_rows("x", "y", None, 0, "skipped"))
    assert list(frame["label"][:2]) == ["high", "low"] and frame["status"].iloc[-1] == "skipped"


def test_clamp_share_guard():
    import datetime as dt
    early = pd.DataFrame([{"district_id": f"D{i}", "year": 2015, "period": 1, "t0": dt.date(2015, 1, 1),
                           "majority_share": 0.9} for i in range(3)])
    with pytest.raises(PerturbationError):
        perturbed_peaks(early, -14)
    assert perturbed_peaks(early, 14)["clamped"].sum() == 0
