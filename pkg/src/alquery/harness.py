"""Experiment orchestration: the active-learning loop, run files and evaluation reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics, oracle, segmenter, strategies
from .core import AnnotationState, Dataset, ExperimentConfig, derive_stream, load_dataset
from .uncertainty import stratify, uncertainty_field

log = logging.getLogger(__name__)

LOOP_SCHEMA = "alquery.loop/1"
RESULTS_FILE = "results.csv"
RUN_FILE = "run.json"
REFERENCE_SEED = 0
BASE_COLUMNS = ["method", "dataset", "seed", "cycle", "budget_patches", "fg_voxels", "mean_dice"]


class ConfigError(ValueError):
    pass


class InconsistentRuns(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


_CONFIG_KEYS = ({f.name for f in fields(ExperimentConfig)} | {"setting"}) - {"threads"}


def config_from_dict(d: dict, seed: int | None = None) -> tuple[ExperimentConfig, str]:
    """Build a config from a JSON document; returns it with the setting label."""
    unknown = set(d) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "dataset" not in d or "method" not in d:
        raise ConfigError("config needs 'dataset' and 'method'")
    d = dict(d)
    setting = d.pop("setting", None)
    method = d["method"]
    try:
        d["method"] = strategies.method_spec(method)
        if seed is not None:
            d["seed"] = seed
        if isinstance(method, str) and not d.get("name"):
            d["name"] = method
        cfg = ExperimentConfig(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if cfg.method.uncertainty == "bald" and cfg.ensemble_size < 2:
        raise ConfigError("BALD-based methods need ensemble_size >= 2")
    return cfg, setting or Path(cfg.dataset).name


def load_config(path: str | Path, seed: int | None = None) -> tuple[ExperimentConfig, str]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(doc, seed)


def method_label(cfg: ExperimentConfig) -> str:
    return cfg.name or cfg.method.kind


def thread_count(cfg: ExperimentConfig | None = None) -> int:
    env = os.environ.get("ALQUERY_THREADS")
    if cfg is not None and cfg.threads:
        return max(int(cfg.threads), 1)
    if env:
        return max(int(env), 1)
    return 1


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# evaluation helpers


def heldout_dice(ensemble: segmenter.Ensemble, test, n_classes: int, threads: int = 1) -> tuple[np.ndarray, float]:
    """Per-class Dice averaged over test images (NaN where undefined) and their mean."""

    def one(item):
        img, lab = item
        return metrics.dice(segmenter.predict_labels(ensemble, img), lab, n_classes)[0]

    per_image = np.array(_map(one, test, threads))
    with np.errstate(all="ignore"):
        per_class = np.array([np.nanmean(col) if np.isfinite(col).any() else np.nan for col in per_image.T])
    mean = float(np.nanmean(per_class)) if np.isfinite(per_class).any() else float("nan")
    return per_class, mean


@lru_cache(maxsize=4)
def _reference(dataset_path: str, ensemble_size: int) -> dict:
    ds = load_dataset(dataset_path)
    return reference_performance(ds, ensemble_size)


def reference_performance(ds: Dataset, ensemble_size: int = 5, threads: int = 1) -> dict:
    """Full-annotation Dice and the pool's total foreground voxel counts."""
    ens = segmenter.fit_full(ds.train, derive_stream(REFERENCE_SEED, "reference"), ensemble_size)
    per_class, mean = heldout_dice(ens, ds.test, ds.n_classes, threads) if ds.test else (np.array([]), float("nan"))
    fg_per_class = np.zeros(ds.n_classes, dtype=np.int64)
    for _, lab in ds.train:
        fg_per_class += np.bincount(lab.labels.ravel(), minlength=ds.n_classes + 1)[1:]
    return {
        "y_full": mean,
        "dice_full_per_class": [float(v) for v in per_class],
        "pool_fg_voxels": int(fg_per_class.sum()),
        "pool_fg_voxels_per_class": [int(v) for v in fg_per_class],
    }


# ---------------------------------------------------------------------------
# the active-learning loop


@dataclass
class RunResult:
    out_dir: Path
    rows: list[dict]
    loops: list[dict]
    state: AnnotationState


def _loop_doc(cycle: int, entries: list[dict], spec, beta, stream, exhausted=False, shortfall=None) -> dict:
    return {
        "schema": LOOP_SCHEMA,
        "cycle": cycle,
        "method": spec.to_dict(),
        "beta": beta,
        "stream": stream.fingerprint,
        "exhausted": exhausted,
        "shortfall": {str(k): v for k, v in (shortfall or {}).items()},
        "patches": entries,
    }


def _score_maps(spec, ensemble, images, threads):
    """Per pool image: the global uncertainty field, or the stratified stack."""

    def one(img):
        members, mean = segmenter.predict_arrays(ensemble, img)
        u = uncertainty_field(spec.uncertainty, members, mean)
        return stratify(u, mean) if spec.stratified else u

    return _map(one, images, threads)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path, setting: str | None = None,
                   dataset: Dataset | None = None) -> RunResult:
    """Run the full loop and write loop_XXX.json, results.csv and run.json to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg.dataset) if dataset is None else dataset
    setting = setting or ds.name
    threads = thread_count(cfg)
    spec = cfg.method
    labels = ds.pool_labels
    images = ds.pool_images
    patch = cfg.patch_size
    n = cfg.query_size
    stride = cfg.resolved_stride(images[0].dims)
    n_queries = cfg.cycles - 1
    T = n_queries - 1
    C = ds.n_classes
    if spec.uncertainty == "bald" and cfg.ensemble_size < 2:
        raise ConfigError("BALD-based methods need ensemble_size >= 2")

    start_stream = derive_stream(cfg.seed, "start")
    state, seeded = oracle.starting_budget_entries(labels, patch, n, start_stream, spec.overlap)
    loops = [_loop_doc(0, [e.to_json() for e in seeded], spec, None, start_stream)]
    fg_by_cycle = [list(state.fg_voxels_per_class)]
    rows = []
    ensemble = None
    for cycle in range(cfg.cycles):
        if cycle > 0:
            t = cycle - 1
            stream = derive_stream(cfg.seed, "query", cycle)
            try:
                kw = {}
                if spec.uses_model:
                    maps = _score_maps(spec, ensemble, images, threads)
                    kw["stacks" if spec.stratified else "fields"] = maps
                else:
                    kw["labels"] = labels
                result = strategies.query(
                    spec, n=n, patch=patch, stride=stride, annotations=state, stream=stream,
                    t=t, T=T, cycle=cycle, **kw,
                )
            except Exception as e:
                raise RuntimeError(f"cycle {cycle}: query failed: {e}") from e
            state = oracle.annotate(state, result, labels)
            loops.append(
                _loop_doc(cycle, [e.to_json() for e in result.entries], spec,
                          strategies.query_beta(spec, t, T), stream, result.exhausted, result.shortfall)
            )
            fg_by_cycle.append(list(state.fg_voxels_per_class))
        try:
            ensemble = segmenter.fit(state, ds.train, derive_stream(cfg.seed, "fit", cycle), cfg.ensemble_size)
        except Exception as e:
            raise RuntimeError(f"cycle {cycle}: fit failed: {e}") from e
        per_class, mean = heldout_dice(ensemble, ds.test, C, threads)
        rows.append(
            {
                "method": method_label(cfg),
                "dataset": setting,
                "seed": cfg.seed,
                "cycle": cycle,
                "budget_patches": state.n_patches,
                "fg_voxels": state.fg_voxels,
                "mean_dice": mean,
                **{f"dice_class_{c}": float(v) for c, v in enumerate(per_class, start=1)},
            }
        )

    for doc in loops:
        _write_json(out / f"loop_{doc['cycle']:03d}.json", doc)
    write_results(out / RESULTS_FILE, rows, C)
    ref = _reference(str(cfg.dataset), cfg.ensemble_size) if dataset is None else reference_performance(
        ds, cfg.ensemble_size, threads)
    _write_json(
        out / RUN_FILE,
        {
            "method": method_label(cfg),
            "method_spec": spec.to_dict(),
            "setting": setting,
            "dataset": str(cfg.dataset),
            "seed": cfg.seed,
            "cycles": cfg.cycles,
            "query_size": n,
            "patch_size": list(patch),
            "stride": stride,
            "ensemble_size": cfg.ensemble_size,
            "n_classes": C,
            "fg_voxels_per_class": fg_by_cycle,
            **ref,
        },
    )
    return RunResult(out, rows, loops, state)


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _write_json(path: Path, doc) -> None:
    """Deterministic JSON; non-finite floats become null."""
    path.write_text(json.dumps(_jsonable(doc), indent=1, sort_keys=True, allow_nan=False) + "\n")


# ---------------------------------------------------------------------------
# results.csv


def results_columns(n_classes: int) -> list[str]:
    return BASE_COLUMNS + [f"dice_class_{c}" for c in range(1, n_classes + 1)]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def serialize_results(rows: Sequence[dict], n_classes: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = results_columns(n_classes)
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in cols])
    return buf.getvalue()


def write_results(path: Path, rows: Sequence[dict], n_classes: int) -> None:
    Path(path).write_text(serialize_results(rows, n_classes))


def parse_results(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    rows = []
    for r in reader:
        row = {}
        for k, v in r.items():
            if k in ("method", "dataset"):
                row[k] = v
            elif k in ("seed", "cycle", "budget_patches", "fg_voxels"):
                row[k] = int(v)
            else:
                row[k] = float(v)
        rows.append(row)
    return rows


def read_results(path: str | Path) -> list[dict]:
    return parse_results(Path(path).read_text())


# ---------------------------------------------------------------------------
# evaluation across runs


@dataclass
class RunSummary:
    record: metrics.TrajectoryRecord
    y_full: float
    pool_fg_voxels: int


def collect_runs(runs_dir: str | Path) -> list[RunSummary]:
    runs = []
    for path in sorted(Path(runs_dir).rglob(RESULTS_FILE)):
        rows = read_results(path)
        if not rows:
            continue
        keys = {(r["method"], r["dataset"], r["seed"]) for r in rows}
        if len(keys) != 1:
            raise InconsistentRuns(f"{path}: mixes several runs")
        method, setting, seed = keys.pop()
        rows.sort(key=lambda r: r["cycle"])
        meta_path = path.parent / RUN_FILE
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        rec = metrics.TrajectoryRecord(
            method, setting, seed,
            [r["budget_patches"] for r in rows],
            [r["fg_voxels"] for r in rows],
            [r["mean_dice"] for r in rows],
            [[v for k, v in r.items() if k.startswith("dice_class_")] for r in rows],
        )
        runs.append(RunSummary(rec, float(meta.get("y_full", float("nan"))), int(meta.get("pool_fg_voxels", 0))))
    if not runs:
        raise InconsistentRuns(f"no {RESULTS_FILE} found under {runs_dir}")
    seen = set()
    cycles: dict[str, int] = {}
    for r in runs:
        key = (r.record.method, r.record.setting, r.record.seed)
        if key in seen:
            raise InconsistentRuns(f"duplicate run {key}")
        seen.add(key)
        if cycles.setdefault(r.record.setting, r.record.n_cycles) != r.record.n_cycles:
            raise InconsistentRuns(f"setting {r.record.setting!r}: runs have different cycle counts")
    return runs


def run_metrics(run: RunSummary) -> dict:
    rec = run.record
    out = {"aubc": metrics.aubc(rec.mean_dice), "final_dice": rec.mean_dice[-1], "fg_eff": float("nan")}
    if run.pool_fg_voxels > 0 and math.isfinite(run.y_full):
        t = np.asarray(rec.fg_voxels, dtype=np.float64) / run.pool_fg_voxels
        try:
            out["fg_eff"] = metrics.fg_eff(t, rec.mean_dice, run.y_full).gamma
        except (metrics.DegenerateFit, metrics.TooFewCycles, ValueError) as e:
            log.info("FG-Eff missing for %s/%s/%s: %s", rec.method, rec.setting, rec.seed, e)
    return out


METRIC_NAMES = ("aubc", "final_dice", "fg_eff")


def _nan_stats(values) -> tuple[float, float]:
    v = np.asarray([x for x in values if math.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def _matrix_csv(path: Path, methods: list[str], mat: np.ndarray, mean_row: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method"] + methods)
        for m, row in zip(methods, mat):
            w.writerow([m] + [repr(float(v)) for v in row])
        w.writerow(["mean"] + [repr(float(v)) for v in mean_row])


def evaluate_runs(runs_dir: str | Path, report_dir: str | Path) -> dict:
    """Summaries, penalty matrices, Friedman/Nemenyi ranks and aggregated means as CSV + JSON."""
    runs = collect_runs(runs_dir)
    out = Path(report_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = sorted({r.record.method for r in runs})
    settings = sorted({r.record.setting for r in runs})
    per_run = [(r, run_metrics(r)) for r in runs]
    notes: list[str] = []

    # per (setting, method) mean and std over seeds
    summary = []
    table: dict[tuple[str, str], dict] = {}
    for s in settings:
        for m in methods:
            vals = [(r, v) for r, v in per_run if r.record.setting == s and r.record.method == m]
            if not vals:
                continue
            entry = {"setting": s, "method": m, "n_seeds": len(vals)}
            for name in METRIC_NAMES:
                entry[f"{name}_mean"], entry[f"{name}_std"] = _nan_stats([v[name] for _, v in vals])
            summary.append(entry)
            table[(s, m)] = entry
    with open(out / "summary.csv", "w", newline="") as fh:
        cols = ["setting", "method", "n_seeds"] + [f"{n}_{s}" for n in METRIC_NAMES for s in ("mean", "std")]
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for e in summary:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in e.items()})

    # pairwise penalty matrices
    records = [r.record for r in runs]
    ppm_report = {}
    min_seeds = min(e["n_seeds"] for e in summary)
    if len(methods) < 2 or min_seeds < 2:
        notes.append("PPM skipped: needs at least two methods and two seeds per method")
    else:
        for label, p, corr in (("p0.05", 0.05, "none"), ("p0.02", 0.02, "none"), ("holm", 0.05, "holm")):
            pm = metrics.ppm(records, p=p, correction=corr, methods=methods)
            _matrix_csv(out / f"ppm_{label}.csv", methods, pm.win, pm.mean_row)
            ppm_report[label] = {"win": pm.win.tolist(), "mean_row": pm.mean_row.tolist(),
                                 "comparisons": pm.n_comparisons}
        n_loops = records[0].n_cycles
        ppm_report["holm_divisor"] = metrics.holm_divisor(len(methods), n_loops)

    # Friedman / Nemenyi over settings, on per-setting means
    friedman = {}
    complete = [s for s in settings if all((s, m) in table for m in methods)]
    if len(complete) < 2 or len(methods) < 2:
        notes.append("Friedman/Nemenyi skipped: needs at least two settings covering every method")
    else:
        for name in METRIC_NAMES:
            scores = np.array([[table[(s, m)][f"{name}_mean"] for m in methods] for s in complete])
            if not np.all(np.isfinite(scores)):
                notes.append(f"Friedman/Nemenyi skipped for {name}: missing values")
                continue
            fn = metrics.friedman_nemenyi(scores, methods)
            friedman[name] = {
                "avg_ranks": dict(zip(methods, fn.avg_ranks.tolist())),
                "statistic": fn.statistic,
                "pvalue": fn.pvalue,
                "nemenyi_p": fn.nemenyi_p.tolist(),
                "groups": fn.groups,
            }
            _matrix_csv(out / f"nemenyi_{name}.csv", methods, fn.nemenyi_p, fn.avg_ranks)

    # aggregated mean with propagated 95% interval over settings
    aggregate = []
    for m in methods:
        for name in METRIC_NAMES:
            rows = [table[(s, m)] for s in settings if (s, m) in table]
            mus = [r[f"{name}_mean"] for r in rows]
            sds = [r[f"{name}_std"] for r in rows]
            n_seeds = min(r["n_seeds"] for r in rows)
            if n_seeds < 2 or not all(math.isfinite(v) for v in mus + sds):
                continue
            mu, se, hw = metrics.aggregate_mean_ci(mus, sds, n_seeds)
            aggregate.append({"method": m, "metric": name, "mean": mu, "se": se, "ci95": hw})
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "metric", "mean", "se", "ci95"], lineterminator="\n")
        w.writeheader()
        for a in aggregate:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in a.items()})

    report = {
        "methods": methods,
        "settings": settings,
        "summary": summary,
        "ppm": ppm_report,
        "friedman_nemenyi": friedman,
        "aggregate": aggregate,
        "notes": notes,
    }
    _write_json(out / "report.json", report)
    return report
