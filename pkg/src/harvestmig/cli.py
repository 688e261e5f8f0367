"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import pipeline
from .calendar import StudyCalendar
from .config import ConfigError, RunConfig
from .econometrics import RankError, SpecError, fit_metadata, run_spec
from .ingest import load_districts, load_towers
from .metrics import MetricsTable
from .panel import PanelBuilder, panel_to_csv, preset, read_panel_csv
from .phenology import peaks_from_frame, read_ndvi_csv, read_peaks_csv
from .reports import (baseline_harvest_histogram, coefficient_table, estimate_totals, excess_series, od_counts,
                      od_matrix)
from .residence import read_segments_csv, shard_file, write_daily_csv, write_segments_csv
from .robustness import (battery_frame, perturbation_battery, placebo_battery, precision_split, restriction_battery,
                         result_rows)
from .spatial import RoadNetwork, RoadViolenceIndex, load_events
from .synth import WorldConfig, WorldConfigError, generate_world

log = logging.getLogger("harvestmig")

STAGES = ("ingest", "residence", "metrics", "phenology", "panel", "fit")


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# output helpers

def write_csv(df: pd.DataFrame, path: Path, fingerprint: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"# fingerprint={fingerprint}\n")
        df.to_csv(fh, index=False, lineterminator="\n", float_format="%.10g")


def write_json(doc: dict, path: Path, fingerprint: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump({"fingerprint": fingerprint, **doc}, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", dtype={"district_id": str, "province_id": str})


# ---------------------------------------------------------------------------

class Runner:
    """Stage execution with completion markers under ``<output>/.stages``."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = cfg.out_dir
        self.fp = cfg.fingerprint()
        s = cfg["study"]
        self.calendar = StudyCalendar(pd.Timestamp(s["start"]).date(), pd.Timestamp(s["end"]).date())
        self._cache: dict = {}

    # -- markers ---------------------------------------------------------------
    def _marker(self, stage: str, kind: str = "done") -> Path:
        return self.out / ".stages" / f"{stage}.{kind}"

    def is_done(self, stage: str) -> bool:
        m = self._marker(stage)
        return m.exists() and m.read_text().strip() == self.fp

    def invalidate_from(self, stage: str):
        for st in STAGES[STAGES.index(stage):]:
            self._marker(st).unlink(missing_ok=True)

    def run(self, stage_from: str | None = None, until: str = "fit") -> list[str]:
        if stage_from:
            self.invalidate_from(stage_from)
        ran = []
        for st in STAGES[:STAGES.index(until) + 1]:
            if self.is_done(st):
                log.info("stage %s: up to date", st)
                continue
            self.invalidate_from(st)
            self._marker(st, "failed").unlink(missing_ok=True)
            log.info("stage %s: running", st)
            t = time.time()
            try:
                getattr(self, f"stage_{st}")()
            except Exception as exc:
                self._marker(st, "failed").parent.mkdir(parents=True, exist_ok=True)
                self._marker(st, "failed").write_text(f"{type(exc).__name__}: {exc}\n")
                raise StageError(f"stage {st} failed: {exc}") from exc
            self._marker(st).parent.mkdir(parents=True, exist_ok=True)
            self._marker(st).write_text(self.fp + "\n")
            log.info("stage %s: done in %.1fs", st, time.time() - t)
            ran.append(st)
        return ran

    # -- shared inputs ----------------------------------------------------------
    def _get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def geoms(self):
        return self._get("geoms", lambda: load_districts(self.cfg.input("districts")))

    @property
    def district_ids(self) -> list[str]:
        return [g.district_id for g in self.geoms]

    @property
    def violence(self):
        return self._get("violence", lambda: load_events(self.cfg.input("violence")))

    @property
    def cultivation(self):
        return self._get("cultivation", lambda: read_csv(self.cfg.input("cultivation")))

    @property
    def taliban(self) -> dict:
        def load():
            c = read_csv(self.cfg.input("control"))
            return {str(d): bool(int(t)) for d, t in zip(c["district_id"], c["taliban"])}
        return self._get("taliban", load)

    @property
    def covariates(self):
        p = self.cfg.input("covariates")
        return self._get("covariates", lambda: read_csv(p) if p else None)

    @property
    def road_index(self):
        p = self.cfg.input("roads")
        if p is None:
            return None
        prm = self.cfg.params
        return self._get("roads", lambda: RoadViolenceIndex(
            self.geoms, RoadNetwork.load(p), float(prm["entry_buffer_km"]), float(prm["road_km"]),
            tuple(prm["road_precisions"])))

    def class_of(self):
        return self._get("class_of", lambda: pipeline.class_map(
            self.district_ids, self.calendar, self.cultivation, self.violence, self.taliban,
            self.cfg.params["high_threshold"]))

    def manifest(self) -> dict:
        with open(self.out / "ingest" / "manifest.json") as fh:
            return json.load(fh)

    def segment_files(self) -> list[str]:
        d = self.out / "residence"
        return sorted(str(p) for p in d.glob("segments-*.csv"))

    def residences(self):
        for f in self.segment_files():
            yield read_segments_csv(f, self.calendar, self.district_ids).matrix(self.calendar.n_days)

    def metrics(self) -> dict[int, MetricsTable]:
        def load():
            return {lag: MetricsTable.load(self.out / "metrics" / f"lag{lag}.npz") for lag in self.cfg.lags()}
        return self._get("metrics", load)

    def peaks(self) -> pd.DataFrame:
        return self._get("peaks", lambda: read_peaks_csv(self.out / "phenology" / "peaks.csv"))

    def builder(self) -> PanelBuilder:
        return self._get("builder", lambda: PanelBuilder(
            self.metrics(), {g.district_id: g.province_id for g in self.geoms}, self.cultivation, self.taliban,
            self.violence, self.covariates, self.road_index, self.cfg.params["high_threshold"]))

    def panel_cfg(self, preset_name: str, outcome: str):
        return preset(preset_name, outcome=outcome, high_threshold=float(self.cfg.params["high_threshold"]))

    def panel_path(self, preset_name: str, outcome: str) -> Path:
        return self.out / "panel" / f"panel_{preset_name}_{outcome}.csv"

    # -- stages -------------------------------------------------------------------
    def stage_ingest(self):
        prm = self.cfg.params
        shard_dir = self.out / "ingest" / "shards"
        if shard_dir.exists():
            shutil.rmtree(shard_dir)
        towers = load_towers(self.cfg.input("towers"))
        registry, report, manifest = pipeline.ingest(self.cfg.event_files(), towers, self.geoms, self.calendar,
                                                     str(shard_dir), self.cfg["shards"], prm["snap_km"])
        write_csv(report.to_frame(), self.out / "ingest" / "rejections.csv", self.fp)
        groups = pd.DataFrame([{"group_id": g.group_id, "members": ";".join(g.member_tower_ids),
                                "lon": g.centroid[0], "lat": g.centroid[1], "district_id": g.district_id or ""}
                               for g in registry.groups])
        write_csv(groups, self.out / "ingest" / "tower_groups.csv", self.fp)
        manifest["paths"] = [os.path.relpath(p, self.out) for p in manifest["paths"]]
        manifest.update({"input_rows": int(sum(report.input_rows.values())),
                         "parsed_rows": int(sum(report.parsed_rows.values())),
                         "rejected": {c: report.count(c) for c in
                                      ("malformed", "bad_timestamp", "out_of_range", "unknown_tower")}})
        write_json(manifest, self.out / "ingest" / "manifest.json", self.fp)

    def stage_residence(self):
        prm = self.cfg.params
        rdir = self.out / "residence"
        if rdir.exists():
            shutil.rmtree(rdir)
        rdir.mkdir(parents=True)
        paths = [str(self.out / p) for p in self.manifest()["paths"]]
        n_subs = n_segs = 0
        for k, sr in pipeline.iter_shard_residence(paths, self.calendar, prm["min_days"], prm["max_gap"]):
            header = f"fingerprint={self.fp}"
            write_segments_csv(shard_file(rdir, "segments", k), sr, self.calendar, self.district_ids, header)
            if prm["write_daily"]:
                write_daily_csv(shard_file(rdir, "daily", k), sr, self.calendar, self.district_ids, header)
            n_subs += len(sr.subscriber_ids)
            n_segs += len(sr.segments)
        write_json({"subscribers": n_subs, "segments": n_segs}, rdir / "summary.json", self.fp)

    def stage_metrics(self):
        mdir = self.out / "metrics"
        mdir.mkdir(parents=True, exist_ok=True)
        tables = {lag: MetricsTable.empty(self.district_ids, self.calendar, lag, self.cfg.params["min_present"])
                  for lag in self.cfg.lags()}
        cls = self.class_of()
        for res in self.residences():
            for m in tables.values():
                m.add_residence(res, cls)
        for lag, m in tables.items():
            m.save(mdir / f"lag{lag}.npz", fingerprint=self.fp)
        write_csv(tables[30].to_frame(), mdir / "district_day_metrics.csv", self.fp)
        self._cache["metrics"] = tables

    def stage_phenology(self):
        peaks, excluded = peaks_from_frame(read_ndvi_csv(self.cfg.input("ndvi")))
        write_csv(peaks, self.out / "phenology" / "peaks.csv", self.fp)
        write_csv(excluded, self.out / "phenology" / "peaks_excluded.csv", self.fp)
        self._cache.pop("peaks", None)

    def stage_panel(self):
        b = self.builder()
        (self.out / "panel").mkdir(parents=True, exist_ok=True)
        for p in self.cfg["presets"]:
            for o in self.cfg["outcomes"]:
                panel = b.build(self.peaks(), self.panel_cfg(p, o))
                panel_to_csv(panel, self.panel_path(p, o), f"fingerprint={self.fp}")
                write_csv(panel.report, self.panel_path(p, o).with_suffix(".report.csv"), self.fp)

    def stage_fit(self):
        summary = []
        for p in self.cfg["presets"]:
            for o in self.cfg["outcomes"]:
                frame = read_panel_csv(self.panel_path(p, o))
                report = read_csv(self.panel_path(p, o).with_suffix(".report.csv"))
                for spec in self.cfg["specs"]:
                    row = {"preset": p, "outcome": o, "spec": spec, "rows": len(frame), "dropped": len(report)}
                    try:
                        res = run_spec(frame, spec, self.builder().cov_cols, ci=self.cfg.params["ci"])
                    except (RankError, SpecError, ValueError) as exc:
                        row["status"] = f"skipped: {exc}"
                        summary.append(row)
                        continue
                    stem = self.out / "fits" / f"{p}_{o}_{spec}"
                    write_csv(res.fit.table(), stem.with_name(stem.name + "_coef.csv"), self.fp)
                    write_csv(res.contrast_frame(), stem.with_name(stem.name + "_contrasts.csv"), self.fp)
                    write_json(fit_metadata(res), stem.with_name(stem.name + "_meta.json"), self.fp)
                    row["status"] = "ok"
                    row["contrasts"] = {c.label: [c.estimate, c.se] for c in res.contrasts}
                    summary.append(row)
        write_json({"fits": summary}, self.out / "summary.json", self.fp)


def print_summary(rows: list[dict]):
    print(f"{'preset':10} {'outcome':10} {'spec':12} {'rows':>5} {'drop':>5}  result")
    for r in rows:
        head = f"{r['preset']:10} {r['outcome']:10} {r['spec']:12} {r['rows']:5d} {r['dropped']:5d}  "
        if r["status"] != "ok":
            print(head + r["status"])
            continue
        items = list(r["contrasts"].items())
        first = True
        for label, (est, se) in items[:6]:
            print((head if first else " " * len(head)) + f"{label:24} {est: .5f} ({se:.5f})")
            first = False
        if len(items) > 6:
            print(" " * len(head) + f"... {len(items) - 6} more contrasts")


# ---------------------------------------------------------------------------
# commands

def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.data["seed"] = args.seed
        cfg.data["params"]["placebo_seed"] = args.seed
    if getattr(args, "shards", None) is not None:
        if args.shards < 1:
            raise ConfigError("--shards must be >= 1")
        cfg.data["shards"] = args.shards
    return cfg


def cmd_synth(args) -> int:
    raw = {}
    base = Path(".")
    if args.config:
        cfg = RunConfig.load(args.config)
        raw = dict(cfg["synth"])
        base = cfg.out_dir
    if args.seed is not None:
        raw["seed"] = args.seed
    wcfg = WorldConfig.from_dict(raw)
    out = Path(args.out) if args.out else base
    world, truth = generate_world(wcfg, out, events=not args.no_events)
    run_cfg = {
        "inputs": {"events": "events", "towers": "towers.csv", "districts": "districts.geojson", "ndvi": "ndvi.csv",
                   "cultivation": "cultivation.csv", "violence": "violence.csv", "control": "control.csv",
                   "covariates": "covariates.csv", "population": "population.csv", "roads": "roads.geojson"},
        "output": "run",
        "study": {"start": str(world.calendar.start), "end": str(world.calendar.end)},
        "seed": wcfg.seed,
        "shards": args.shards or 16,
    }
    with open(out / "run.yaml", "w") as fh:
        yaml.safe_dump(run_cfg, fh, sort_keys=False)
    print(f"world written to {out} ({len(world.subscriber_ids)} subscribers, "
          f"{len(truth.pulses)} pulses); run config: {out / 'run.yaml'}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    cfg.check_inputs()
    r = Runner(cfg)
    ran = r.run(args.stage_from)
    print(f"stages run: {', '.join(ran)}" if ran else "all stages up to date")
    with open(r.out / "summary.json") as fh:
        print_summary(json.load(fh)["fits"])
    return 0


def _prepared(args, until: str = "panel") -> Runner:
    cfg = _load_config(args)
    cfg.check_inputs()
    r = Runner(cfg)
    r.run(None, until=until)
    return r


def cmd_figures(args) -> int:
    r = _prepared(args)
    fdir = r.out / "figures"
    b = r.builder()
    panel = b.build(r.peaks(), r.panel_cfg("main", "in_rate"), keep_series=True)
    write_csv(excess_series(panel), fdir / "excess_series.csv", r.fp)
    write_csv(baseline_harvest_histogram(panel), fdir / "baseline_harvest_histogram.csv", r.fp)
    od = od_matrix(od_counts(r.residences(), r.peaks(), r.district_ids, r.calendar), r.district_ids)
    write_csv(od, fdir / "od_matrix.csv", r.fp)
    cov = b.cov_cols
    tables = {
        "cultivation": {"in_rate": ("eq2", "in_rate")},
        "conflict": {"eq4": ("eq4", "in_rate")},
        "composition_class": {o: ("eq2", o) for o in ("comp_high", "comp_low", "comp_none")},
        "composition_conflict": {o: ("eq2", o) for o in ("comp_any_v1", "comp_any_t1")},
        "eradication": {"erad": ("erad", "in_rate")},
    }
    if r.road_index is not None:
        tables["road_violence"] = {"eq5": ("eq5", "in_rate")}
    panels = {"in_rate": panel}
    for name, models in tables.items():
        results = {}
        for label, (spec, outcome) in models.items():
            if outcome not in panels:
                panels[outcome] = b.build(r.peaks(), r.panel_cfg("main", outcome))
            try:
                results[label] = run_spec(panels[outcome].frame, spec, cov, ci=r.cfg.params["ci"])
            except (RankError, SpecError, ValueError) as exc:
                log.warning("%s/%s skipped: %s", name, label, exc)
        write_csv(coefficient_table(results), fdir / f"{name}_coefficients.csv", r.fp)
    print(f"figure tables written to {fdir}")
    return 0


def cmd_totals(args) -> int:
    r = _prepared(args)
    pop_path = r.cfg.input("population")
    if pop_path is None:
        raise ConfigError("totals needs inputs.population")
    panel = r.builder().build(r.peaks(), r.panel_cfg("main", "in_rate"))
    coef = args.coefficient
    if coef is None:
        coef = run_spec(panel.frame, "eq2", r.builder().cov_cols).get("high").estimate
    high = panel.frame[panel.frame["cultivation_class"] == "high"]
    per_dy, per_year, skipped = estimate_totals(coef, high, read_csv(pop_path))
    tdir = r.out / "totals"
    write_csv(per_dy, tdir / "totals_district_year.csv", r.fp)
    write_csv(per_year, tdir / "totals_year.csv", r.fp)
    summary = {"coefficient": coef, "skipped": skipped.to_dict("records"),
               "min_district": float(per_dy["migrants"].min()) if len(per_dy) else None,
               "max_district": float(per_dy["migrants"].max()) if len(per_dy) else None,
               "min_year": float(per_year["migrants"].min()) if len(per_year) else None,
               "max_year": float(per_year["migrants"].max()) if len(per_year) else None}
    write_json(summary, tdir / "totals_summary.json", r.fp)
    print(json.dumps(summary, indent=1, default=_jsonable))
    return 0


def cmd_placebo(args) -> int:
    r = _prepared(args)
    prm = r.cfg.params
    R = args.R or int(prm["placebo_R"])
    res = placebo_battery(r.builder(), r.peaks(), R, int(prm["placebo_seed"]), r.panel_cfg("main", "in_rate"),
                          workers=args.workers or int(prm["placebo_workers"]))
    write_csv(res.frame(), r.out / "robustness" / "placebo_coefficients.csv", r.fp)
    write_json(res.summary(), r.out / "robustness" / "placebo_summary.json", r.fp)
    print(json.dumps(res.summary(), indent=1, default=_jsonable))
    return 0


def cmd_robustness(args) -> int:
    r = _prepared(args)
    prm = r.cfg.params
    b = r.builder()
    peaks = r.peaks()
    base_cfg = r.panel_cfg("main", "in_rate")
    base = b.build(peaks, base_cfg)
    rows = []
    rows += result_rows("base", "main", run_spec(base.frame, "eq2", b.cov_cols), base.n)
    d = int(prm["perturb_days"])
    for shift, res in perturbation_battery(b, peaks, (-d, d), base_cfg).items():
        rows += result_rows("perturbation", f"{shift:+d}d", res, res.fit.n)
    split = precision_split(base, float(prm["precision_threshold"]))
    rows += result_rows("precision", "majority", split.majority, split.n_majority,
                        "ok" if split.majority else "; ".join(split.skipped))
    rows += result_rows("precision", "minority", split.minority, split.n_minority,
                        "ok" if split.minority else "; ".join(split.skipped))
    for name in ("tabS1_c2", "tabS1_c3", "tabS1_c4", "tabS1_c5"):
        cfg = preset(name, high_threshold=base_cfg.high_threshold)
        if cfg.lag not in b.metrics:
            rows += result_rows("outcome_variant", name, None, 0, f"skipped: lag {cfg.lag} not computed")
            continue
        p = b.build(peaks, cfg)
        rows += _safe_rows("outcome_variant", name, p.frame, "eq2", b.cov_cols)
    rows += _safe_rows("outcome_variant", "continuous", base.frame, "eq1_cont", b.cov_cols)
    for br in restriction_battery(base):
        rows += result_rows("restriction", f"{br.variant}/{br.spec}", br.result, br.n, br.status)
    write_csv(battery_frame(rows), r.out / "robustness" / "robustness.csv", r.fp)
    print(f"robustness report: {r.out / 'robustness' / 'robustness.csv'} ({len(rows)} rows)")
    return 0


def _safe_rows(battery, variant, frame, spec, cov):
    try:
        return result_rows(battery, variant, run_spec(frame, spec, cov), len(frame))
    except (RankError, SpecError, ValueError) as exc:
        return result_rows(battery, variant, None, 0, f"skipped: {exc}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="harvestmig", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML or JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--shards", type=int, default=None)

    p = sub.add_parser("synth", help="generate a synthetic world and a matching run config")
    common(p, config_required=False)
    p.add_argument("--out", help="output directory (default: the config's output)")
    p.add_argument("--no-events", action="store_true", help="skip the event CSVs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="ingest -> residence -> metrics -> phenology -> panel -> fit")
    common(p)
    p.add_argument("--stage-from", choices=STAGES, default=None, help="recompute from this stage on")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("figures", help="plot-ready CSV tables")
    common(p)
    p.set_defaults(func=cmd_figures)

    p = sub.add_parser("totals", help="seasonal migrant totals from the high-cultivation coefficient")
    common(p)
    p.add_argument("--coefficient", type=float, default=None, help="use this coefficient instead of the fit")
    p.set_defaults(func=cmd_totals)

    p = sub.add_parser("placebo", help="random peak-date placebo battery")
    common(p)
    p.add_argument("--R", type=int, default=None, help="iterations (default params.placebo_R)")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_placebo)

    p = sub.add_parser("robustness", help="perturbation, precision, preset and restriction batteries")
    common(p)
    p.set_defaults(func=cmd_robustness)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, WorldConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
