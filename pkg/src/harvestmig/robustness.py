"""Robustness batteries: placebo peak dates, date perturbations, precision
splits and sample restrictions. All of them reuse the cached district-day
metrics held by a :class:`PanelBuilder`; only window extraction, the panel
and the regression are recomputed per variant.
"""

from __future__ import annotations

import concurrent.futures as cf
import multiprocessing as mp
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from .econometrics import RankError, SpecError, SpecResult, run_spec
from .panel import Panel, PanelBuilder, PanelConfig
from .phenology import PERIOD_DAYS, SPRING_PERIODS, peak_record, peaks_to_list, perturb_peak, placebo_peak

MAX_CLAMPED_SHARE = 0.5
# A shift as long as the spring season moves every peak out of it.
MAX_SHIFT_DAYS = SPRING_PERIODS * PERIOD_DAYS

REPORT_COLUMNS = ["battery", "variant", "spec", "label", "estimate", "se", "z", "p", "ci_lo", "ci_hi", "n",
                  "status"]


class PerturbationError(ValueError):
    pass


@dataclass
class PlaceboRun:
    iteration: int
    seed: tuple[int, int]
    coefficient: float | None
    n: int
    metadata: dict = field(default_factory=dict)
    error: str | None = None


@dataclass
class PlaceboResult:
    observed: float
    runs: list[PlaceboRun]
    term: str

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([r.coefficient for r in self.runs if r.error is None], dtype=float)

    @property
    def failures(self) -> int:
        return sum(r.error is not None for r in self.runs)

    @property
    def n_at_least(self) -> int:
        return int(np.sum(self.coefficients >= self.observed))

    @property
    def p_value(self) -> float:
        """(1 + #{placebo >= observed}) / (R + 1) over successful iterations."""
        return (1 + self.n_at_least) / (len(self.coefficients) + 1)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "iteration": [r.iteration for r in self.runs],
            "coefficient": [r.coefficient for r in self.runs],
            "n": [r.n for r in self.runs],
            "error": [r.error or "" for r in self.runs],
        })

    def summary(self) -> dict:
        return {"term": self.term, "observed": self.observed, "iterations": len(self.runs),
                "failures": self.failures, "placebo_at_least_observed": self.n_at_least,
                "p_value": self.p_value,
                "placebo_max": float(self.coefficients.max()) if len(self.coefficients) else None}


def fit_panel(panel: Panel, spec: str = "eq2", violence_col: str = "violence") -> SpecResult:
    return run_spec(panel.frame, spec, panel.covariates, violence_col=violence_col)


def placebo_peaks(peaks: pd.DataFrame, master_seed: int, iteration: int) -> pd.DataFrame:
    rows = [peak_record(placebo_peak((master_seed, iteration), str(r.district_id), int(r.year)))
            for r in peaks.itertuples(index=False)]
    return pd.DataFrame(rows)


def _placebo_iteration(builder: PanelBuilder, peaks, cfg, spec, term, master_seed, i) -> PlaceboRun:
    try:
        panel = builder.build(placebo_peaks(peaks, master_seed, i), cfg, road_violence=False)
        res = fit_panel(panel, spec)
        return PlaceboRun(i, (master_seed, i), res.get(term).estimate, panel.n,
                          {"N": res.fit.n, "K": res.fit.k, "G": res.fit.g,
                           "dropped": len(panel.report)})
    except (RankError, SpecError, ValueError, KeyError) as exc:
        return PlaceboRun(i, (master_seed, i), None, 0, error=f"{type(exc).__name__}: {exc}")


_WORKER: dict = {}


def _init_worker(builder, peaks, cfg, spec, term, master_seed):
    _WORKER.update(builder=builder, args=(peaks, cfg, spec, term, master_seed))


def _worker_run(i: int) -> PlaceboRun:
    return _placebo_iteration(_WORKER["builder"], *_WORKER["args"], i)


def placebo_battery(builder: PanelBuilder, peaks: pd.DataFrame, R: int = 250, master_seed: int = 0,
                    cfg: PanelConfig = PanelConfig(), spec: str = "eq2", term: str = "high",
                    workers: int = 1, progress: Callable[[int], None] | None = None) -> PlaceboResult:
    """Observed coefficient and R placebo coefficients from random spring peak periods."""
    if R < 1:
        raise ValueError("R must be >= 1")
    observed = fit_panel(builder.build(peaks, cfg, road_violence=False), spec).get(term).estimate
    iters = range(1, R + 1)
    if workers <= 1:
        runs = []
        for i in iters:
            runs.append(_placebo_iteration(builder, peaks, cfg, spec, term, master_seed, i))
            if progress:
                progress(i)
    else:
        ctx = mp.get_context("fork")
        with cf.ProcessPoolExecutor(workers, mp_context=ctx, initializer=_init_worker,
                                    initargs=(builder, peaks, cfg, spec, term, master_seed)) as ex:
            runs = list(ex.map(_worker_run, iters, chunksize=max(1, R // (4 * workers))))
    runs.sort(key=lambda r: r.iteration)
    return PlaceboResult(float(observed), runs, term)


def perturbed_peaks(peaks: pd.DataFrame, delta_days: int, max_clamped: float = MAX_CLAMPED_SHARE) -> pd.DataFrame:
    if abs(int(delta_days)) >= MAX_SHIFT_DAYS:
        raise PerturbationError(f"shift of {delta_days} days spans the whole {MAX_SHIFT_DAYS}-day spring season")
    shifted = [perturb_peak(p, delta_days) for p in peaks_to_list(peaks)]
    clamped = np.mean([p.clamped for p in shifted]) if shifted else 0.0
    if clamped > max_clamped:
        raise PerturbationError(f"shift of {delta_days} days clamps {clamped:.0%} of peak dates to the year edge")
    out = pd.DataFrame([peak_record(p) for p in shifted])
    out["clamped"] = [p.clamped for p in shifted]
    return out


def perturbation_battery(builder: PanelBuilder, peaks: pd.DataFrame, shifts: Sequence[int] = (-14, 14),
                         cfg: PanelConfig = PanelConfig(), spec: str = "eq2") -> dict[int, SpecResult]:
    """Refit after moving every peak date by each shift (days)."""
    out = {}
    for s in shifts:
        panel = builder.build(perturbed_peaks(peaks, int(s)), cfg)
        out[int(s)] = fit_panel(panel, spec)
    return out


@dataclass
class SplitResult:
    majority: SpecResult | None
    minority: SpecResult | None
    n_majority: int
    n_minority: int
    skipped: list[str]


def precision_split(panel: Panel, threshold: float = 0.5, spec: str = "eq2") -> SplitResult:
    """Separate fits where more than ``threshold`` of pixels agree on the peak, and the rest."""
    f = panel.frame
    maj = f["majority_share"] > threshold
    out, skipped = {}, []
    for name, mask in (("majority", maj), ("minority", ~maj)):
        sub = f[mask.to_numpy()]
        if len(sub) == 0:
            skipped.append(f"{name}: empty subsample")
            out[name] = None
            continue
        try:
            out[name] = run_spec(sub, spec, panel.covariates)
        except (RankError, SpecError, ValueError) as exc:
            skipped.append(f"{name}: {exc}")
            out[name] = None
    return SplitResult(out["majority"], out["minority"], int(maj.sum()), int((~maj).sum()), skipped)


def restriction_presets(frame: pd.DataFrame) -> dict[str, Callable[[pd.DataFrame], pd.Series]]:
    presets: dict[str, Callable] = {"max5000ha": lambda f: f["poppy_ha"] <= 5000}
    for y in sorted(frame["year"].unique()):
        presets[f"drop_{y}"] = lambda f, y=y: f["year"] != y
    presets["pre2017"] = lambda f: f["year"] < 2017
    presets["post2017"] = lambda f: f["year"] >= 2017
    return presets


def restrict(frame: pd.DataFrame, keep) -> pd.DataFrame:
    out = frame[np.asarray(keep, dtype=bool)]
    if len(out) == 0:
        raise SpecError("restriction leaves no rows")
    return out


@dataclass
class BatteryRow:
    variant: str
    spec: str
    result: SpecResult | None
    n: int
    status: str


def restriction_battery(panel: Panel, specs: Sequence[str] = ("eq2", "eq4"),
                        violence_variants: Sequence[str] = ("violence_gt2", "violence_deaths10")) -> list[BatteryRow]:
    """eq2/eq4 under each sample restriction plus eq4 with stricter violence definitions."""
    rows = []
    for name, pred in restriction_presets(panel.frame).items():
        for spec in specs:
            try:
                sub = restrict(panel.frame, pred(panel.frame))
                rows.append(BatteryRow(name, spec, run_spec(sub, spec, panel.covariates), len(sub), "ok"))
            except (RankError, SpecError, ValueError) as exc:
                rows.append(BatteryRow(name, spec, None, 0, f"skipped: {exc}"))
    if "eq4" in specs:
        for vc in violence_variants:
            try:
                res = run_spec(panel.frame, "eq4", panel.covariates, violence_col=vc)
                rows.append(BatteryRow(f"violence={vc}", "eq4", res, panel.n, "ok"))
            except (RankError, SpecError, ValueError) as exc:
                rows.append(BatteryRow(f"violence={vc}", "eq4", None, 0, f"skipped: {exc}"))
    return rows


def result_rows(battery: str, variant: str, res: SpecResult | None, n: int, status: str = "ok") -> list[dict]:
    if res is None:
        return [{"battery": battery, "variant": variant, "spec": "", "label": "", "n": n, "status": status}]
    return [{"battery": battery, "variant": variant, "spec": res.spec, "label": c.label, "estimate": c.estimate,
             "se": c.se, "z": c.z, "p": c.p, "ci_lo": c.ci_lo, "ci_hi": c.ci_hi, "n": res.fit.n, "status": status}
            for c in res.contrasts]


def battery_frame(rows: list[dict]) -> pd.DataFrame:
    return pd.DataFrame(rows).reindex(columns=REPORT_COLUMNS)
