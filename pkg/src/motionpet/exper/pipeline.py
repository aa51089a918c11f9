"""End-to-end experiment: cohort -> phantoms -> traces -> list mode -> MC/NMC recon
-> features -> per-depth SVM + linear head -> metrics, tables and ROC figures.

Per-subject artifacts live in ``<run>/subjects/<id>/``. Each stage records
a key derived from the configuration it depends on, the subject and its
upstream keys. Completed stages with matching keys are reused; a stage is
recomputed when its output is missing or an upstream stage was recomputed
in the same invocation. A stored key that disagrees with the current
configuration raises :class:`HashMismatchError`.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .. import __version__, classify, features, metrics, motion, phantom, recon, simulate
from ..errors import HashMismatchError, MissingStageError
from ..seeding import substream
from ..volume import read_volume, write_volume
from .config import ExperimentConfig, digest, dump_config

log = logging.getLogger(__name__)

MODES = ("mc", "nmc")
REPORT_COLUMNS = ["tracer_analog", "feature_depth", "mode", "accuracy", "precision", "recall", "f1", "auroc"]
HEAD_DEPTH = "head"


# ---------------------------------------------------------------------------
# stage bookkeeping


class StageBook:
    """Per-subject record of stage keys (``stages.json``)."""

    def __init__(self, directory: Path):
        self.dir = directory
        self.path = directory / "stages.json"
        self.keys = json.loads(self.path.read_text()) if self.path.exists() else {}
        self.fresh: set[str] = set()
        self.timings: dict[str, float] = {}

    def needs_run(self, stage: str, key: str, outputs, upstream=()) -> bool:
        have = all((self.dir / o).exists() for o in outputs)
        stored = self.keys.get(stage)
        if have and stored is not None and stored != key:
            raise HashMismatchError(
                f"{self.dir.name}/{stage}: stored key {stored} does not match {key}; "
                "the run directory was produced by a different configuration")
        if not have or stored is None:
            return True
        return any(u in self.fresh for u in upstream)

    def done(self, stage: str, key: str, seconds: float) -> None:
        self.keys[stage] = key
        self.fresh.add(stage)
        self.timings[stage] = seconds
        tmp = self.path.with_name("stages.json.tmp")
        tmp.write_text(json.dumps(self.keys, indent=1, sort_keys=True))
        tmp.replace(self.path)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _grid(cfg: ExperimentConfig):
    return cfg.recon.dims, cfg.recon.voxel_mm


# ---------------------------------------------------------------------------
# shared NMC sensitivity


def shared_dir(run_dir: Path) -> Path:
    return run_dir / "shared"


def ensure_nmc_sensitivity(cfg: ExperimentConfig, run_dir: Path, attenuation) -> Path:
    """NMC sensitivity depends only on the attenuation map, so it is shared by content hash."""
    att_key = digest([attenuation.dims, attenuation.voxel_mm,
                      hashlib.sha256(np.ascontiguousarray(attenuation.data, dtype="<f4")).hexdigest()])
    key = digest(["sens-nmc", asdict(cfg.scanner), asdict(cfg.recon), att_key])
    d = shared_dir(run_dir)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"sensitivity_nmc_{key}.pvol"
    if not path.exists():
        # the stored float32 values, exactly as subjects read them back from attenuation.pvol
        attenuation = attenuation.like(np.asarray(attenuation.data, dtype=np.float32))
        sens = recon.sensitivity_image(cfg.scanner, attenuation, None, cfg.recon.config(),
                                       cfg.recon.sensitivity_seed)
        write_volume(sens.volume, path)
    return path


# ---------------------------------------------------------------------------
# per-subject stages


def process_subject(cfg: ExperimentConfig, run_dir: str, record: phantom.SubjectRecord) -> dict:
    run_dir = Path(run_dir)
    sdir = run_dir / "subjects" / record.id
    sdir.mkdir(parents=True, exist_ok=True)
    book = StageBook(sdir)
    dims, voxel = _grid(cfg)
    params = cfg.phantom.params()
    rcfg = cfg.recon.config()

    # phantom
    k_ph = digest(["phantom", record.id, record.label, record.seed, asdict(params), dims, voxel])
    if book.needs_run("phantom", k_ph, ["activity.pvol", "attenuation.pvol"]):
        t0 = time.perf_counter()
        act, mu = phantom.make_phantom(params, record.label, record.seed, dims, voxel)
        write_volume(act, sdir / "activity.pvol")
        write_volume(mu, sdir / "attenuation.pvol")
        book.done("phantom", k_ph, time.perf_counter() - t0)

    # motion trace
    c = cfg.cohort
    k_tr = digest(["trace", record.id, record.seed, record.motion_amplitude_mm, c.motion_kind,
                   c.n_segments, c.duration_s])
    if book.needs_run("trace", k_tr, ["trace.csv"]):
        t0 = time.perf_counter()
        motion.write_trace(phantom.subject_trace(record, c), sdir / "trace.csv")
        book.done("trace", k_tr, time.perf_counter() - t0)

    # list-mode simulation
    k_sim = digest(["simulate", k_ph, k_tr, asdict(cfg.scanner), asdict(cfg.simulate)])
    if book.needs_run("simulate", k_sim, ["events.plm"], upstream=("phantom", "trace")):
        t0 = time.perf_counter()
        act = read_volume(sdir / "activity.pvol")
        mu = read_volume(sdir / "attenuation.pvol")
        trace = motion.read_trace(sdir / "trace.csv")
        ev = simulate.simulate_listmode(act, mu, trace, cfg.scanner, cfg.simulate.events,
                                        substream(record.seed, "simulate"),
                                        chunk_events=cfg.simulate.chunk_events)
        simulate.write_listmode(ev, sdir / "events.plm")
        book.done("simulate", k_sim, time.perf_counter() - t0)

    # reconstructions
    k_rec = {m: digest(["recon", m, k_sim, asdict(cfg.scanner), asdict(cfg.recon)]) for m in MODES}
    pending = [m for m in MODES
               if book.needs_run(f"recon_{m}", k_rec[m], [f"recon_{m}.pvol"], upstream=("simulate",))]
    if pending:
        ev = simulate.read_listmode(sdir / "events.plm")
        mu = read_volume(sdir / "attenuation.pvol")
        trace = motion.read_trace(sdir / "trace.csv")
        for m in pending:
            t0 = time.perf_counter()
            if m == "mc":
                # stored like the shared NMC image, so both modes see the same float32 values
                sens = recon.sensitivity_image(cfg.scanner, mu, trace, rcfg, cfg.recon.sensitivity_seed)
                write_volume(sens.volume, sdir / "sensitivity_mc.pvol")
                sens = recon.Sensitivity(read_volume(sdir / "sensitivity_mc.pvol"), "MC")
                used_trace = trace
            else:
                path = ensure_nmc_sensitivity(cfg, run_dir, mu)
                sens = recon.Sensitivity(read_volume(path), "NMC")
                used_trace = None
            vol = recon.osem_listmode(ev, cfg.scanner, mu, used_trace, rcfg, cfg.recon.sensitivity_seed,
                                      sensitivity=sens)
            dt = time.perf_counter() - t0
            recon.write_recon(vol, sdir / f"recon_{m}.pvol", config=rcfg, mode=m.upper(),
                              events_used=len(ev), wall_time_s=dt,
                              extra={"subject_id": record.id,
                                     "motion_magnitude_mm": motion.motion_magnitude(trace)})
            book.done(f"recon_{m}", k_rec[m], dt)

    # features
    ecfg = cfg.features.config()
    for m in MODES:
        k_ft = digest(["features", m, k_rec[m], asdict(ecfg), cfg.features.prefilter_fwhm_mm])
        if book.needs_run(f"features_{m}", k_ft, [f"features_{m}.csv"], upstream=(f"recon_{m}",)):
            t0 = time.perf_counter()
            vol = features.prepare_input(read_volume(sdir / f"recon_{m}.pvol"), ecfg.input_dim,
                                         cfg.features.prefilter_fwhm_mm)
            fvs = features.extract_features(vol, ecfg, record.id)
            features.write_features([(fv, record.label) for fv in fvs], sdir / f"features_{m}.csv")
            book.done(f"features_{m}", k_ft, time.perf_counter() - t0)

    trace = motion.read_trace(sdir / "trace.csv")
    return {"id": record.id, "fresh": sorted(book.fresh), "timings": book.timings,
            "motion_magnitude_mm": motion.motion_magnitude(trace)}


# ---------------------------------------------------------------------------
# classification and reporting


def load_subject_features(run_dir: Path, records, mode: str) -> dict[int, list]:
    by_depth: dict[int, list] = {}
    for r in records:
        path = run_dir / "subjects" / r.id / f"features_{mode}.csv"
        if not path.exists():
            raise MissingStageError(f"features missing for {r.id} ({mode})")
        for fv, label in features.read_features(path):
            by_depth.setdefault(fv.depth, []).append((fv, label))
    return by_depth


def write_depth_tables(run_dir: Path, records, modes=MODES) -> None:
    out = run_dir / "features"
    out.mkdir(exist_ok=True)
    for m in modes:
        for depth, rows in load_subject_features(run_dir, records, m).items():
            features.write_features(rows, out / f"{m}_depth{depth}.csv")


def fit_and_evaluate(cfg: ExperimentConfig, run_dir: Path, records, out_dir: Path | None = None,
                     depths=None, C: float | None = None) -> list[dict]:
    """Fit one SVM per depth (and the linear head on depth 4); score test MC and NMC."""
    out_dir = out_dir or run_dir
    (out_dir / "models").mkdir(parents=True, exist_ok=True)
    depths = tuple(depths or cfg.experiment.depths)
    C = cfg.classify.C if C is None else C
    cl = cfg.classify
    fit_records = [r for r in records if r.split in ("train", "val")]
    test_records = [r for r in records if r.split == "test"]
    if not fit_records or not test_records:
        raise MissingStageError("need training/validation and test subjects")
    train_feats = load_subject_features(run_dir, fit_records, cfg.experiment.train_on)
    test_feats = {m: load_subject_features(run_dir, test_records, m) for m in MODES}
    tracer = cfg.phantom.preset

    rows, scores = [], {}
    for depth in depths:
        X, y = zip(*train_feats[depth])
        model = classify.svm_train(list(X), list(y), C=C, tol=cl.tol, max_epochs=cl.max_epochs)
        classify.save_model(model, out_dir / "models" / f"svm_depth{depth}.json")
        for m in MODES:
            fv, labels = zip(*test_feats[m][depth])
            s = classify.svm_score(model, [f.values for f in fv])
            rep = metrics.evaluate(s, labels)
            scores[(str(depth), m)] = (np.asarray(s), list(labels), [f.subject_id for f in fv])
            rows.append({"tracer_analog": tracer, "feature_depth": str(depth), "mode": m.upper(),
                         **{k: getattr(rep, k) for k in REPORT_COLUMNS[3:]}})

    X, y = zip(*train_feats[4]) if 4 in train_feats else zip(*train_feats[max(train_feats)])
    head = classify.head_train(list(X), list(y), lr=cl.head_lr, epochs=cl.head_epochs, l2=cl.head_l2)
    classify.save_model(head, out_dir / "models" / "head.json")
    head_depth = head.depth
    for m in MODES:
        fv, labels = zip(*test_feats[m][head_depth])
        s = classify.svm_score(head, [f.values for f in fv])
        rep = metrics.evaluate(s, labels)
        scores[(HEAD_DEPTH, m)] = (np.asarray(s), list(labels), [f.subject_id for f in fv])
        rows.append({"tracer_analog": tracer, "feature_depth": HEAD_DEPTH, "mode": m.upper(),
                     **{k: getattr(rep, k) for k in REPORT_COLUMNS[3:]}})

    write_report_csv(rows, out_dir / "report.csv")
    write_scores(scores, out_dir / "scores.csv")
    best = best_depth(rows)
    for name, depth in (("roc_best_svm.svg", best), ("roc_head.svg", HEAD_DEPTH)):
        curves = {f"{m.upper()} (AUROC {metrics.auroc(*scores[(depth, m)][:2]):.2f})":
                  metrics.roc_points(*scores[(depth, m)][:2]) for m in MODES}
        title = f"{tracer}: " + (f"depth {depth} + SVM" if depth != HEAD_DEPTH else "linear head")
        metrics.emit_roc_svg(curves, out_dir / name, title)
    (out_dir / "report.txt").write_text(format_table(rows) + "\n")
    return rows


def best_depth(rows) -> str:
    """SVM depth with the highest MC accuracy (ties go to the shallower depth)."""
    svm = [r for r in rows if r["feature_depth"] != HEAD_DEPTH and r["mode"] == "MC"]
    return max(svm, key=lambda r: (r["accuracy"], -int(r["feature_depth"])))["feature_depth"]


def write_report_csv(rows, path) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, REPORT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    tmp.replace(path)


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in REPORT_COLUMNS[3:]:
            r[k] = float(r[k])
    return rows


def write_scores(scores, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature_depth", "mode", "subject_id", "label", "score"])
        for (depth, m), (s, labels, ids) in scores.items():
            for sid, lab, v in zip(ids, labels, s):
                w.writerow([depth, m.upper(), sid, lab, repr(float(v))])


def format_table(rows) -> str:
    """Classifier variants as rows, (MC, NMC) column pairs per metric; '*' marks the best MC accuracy."""
    metric_names = [("accuracy", "Accuracy"), ("precision", "Precision"), ("recall", "Recall"),
                    ("f1", "F1-score"), ("auroc", "AUROC")]
    variants = []
    for r in rows:
        if r["feature_depth"] not in variants:
            variants.append(r["feature_depth"])
    lookup = {(r["feature_depth"], r["mode"]): r for r in rows}
    svm_rows = [r for r in rows if r["feature_depth"] != HEAD_DEPTH]
    best = best_depth(rows) if svm_rows else None
    tracer = rows[0]["tracer_analog"] if rows else ""

    def name(v):
        if v == HEAD_DEPTH:
            return "Linear head (direct)"
        return f"Depth {v} ({features.STAGE_CHANNELS[int(v) - 1]} feat.) + SVM"

    head = f"{'Tracer':<10}{'Classification':<30}" + "".join(f"{m:>16}" for _, m in metric_names)
    sub = " " * 40 + "".join(f"{'MC':>8}{'NMC':>8}" for _ in metric_names)
    lines = [head, sub, "-" * len(head)]
    for v in variants:
        mark = "*" if v == best else " "
        cells = ""
        for key, _ in metric_names:
            mc = lookup.get((v, "MC"), {}).get(key, float("nan"))
            nmc = lookup.get((v, "NMC"), {}).get(key, float("nan"))
            cells += f"{mc:>8.2f}{nmc:>8.2f}"
        lines.append(f"{tracer:<10}{mark}{name(v):<29}{cells}")
    return "\n".join(lines)


def report_table(run_dir) -> str:
    run_dir = Path(run_dir)
    path = run_dir / "report.csv"
    if not path.exists():
        raise MissingStageError(f"{run_dir}: no report.csv; the classification stage has not completed")
    table = format_table(read_report_csv(path))
    (run_dir / "report.txt").write_text(table + "\n")
    return table


# ---------------------------------------------------------------------------
# driver


def _check_manifest(run_dir: Path, cfg: ExperimentConfig) -> None:
    path = run_dir / "manifest.json"
    if path.exists():
        stored = json.loads(path.read_text()).get("config_hash")
        if stored != cfg.config_hash():
            raise HashMismatchError(
                f"{run_dir} holds a run with config {stored}; current config is {cfg.config_hash()}")


def run_pipeline(cfg: ExperimentConfig, run_dir=None, workers: int | None = None) -> Path:
    run_dir = Path(run_dir or cfg.experiment.output_dir)
    workers = workers or cfg.experiment.workers
    run_dir.mkdir(parents=True, exist_ok=True)
    _check_manifest(run_dir, cfg)
    (run_dir / "config.ini").write_text(dump_config(cfg))
    t_start = time.perf_counter()

    records = phantom.make_cohort(cfg.cohort, cfg.experiment.master_seed)
    (run_dir / "cohort.json").write_text(json.dumps([asdict(r) for r in records], indent=1))

    # shared sensitivity first so workers only read it
    _, mu = phantom.make_phantom(cfg.phantom.params(), "CN", 0, *_grid(cfg))
    ensure_nmc_sensitivity(cfg, run_dir, mu)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(process_subject, [cfg] * len(records), [str(run_dir)] * len(records),
                                    records))
    else:
        results = [process_subject(cfg, str(run_dir), r) for r in records]

    t_cls = time.perf_counter()
    write_depth_tables(run_dir, records)
    rows = fit_and_evaluate(cfg, run_dir, records)
    t_end = time.perf_counter()

    mags = {r["id"]: r["motion_magnitude_mm"] for r in results}
    test_mags = [mags[r.id] for r in records if r.split == "test"]
    manifest = {
        "config_hash": cfg.config_hash(),
        "master_seed": cfg.experiment.master_seed,
        "subjects": [{"id": r.id, "label": r.label, "split": r.split, "seed": r.seed,
                      "motion_amplitude_mm": r.motion_amplitude_mm,
                      "motion_magnitude_mm": mags[r.id]} for r in records],
        "test_motion_magnitude_mm": {"mean": float(np.mean(test_mags)) if test_mags else 0.0,
                                     "std": float(np.std(test_mags)) if test_mags else 0.0},
        "stage_timings_s": {r["id"]: r["timings"] for r in results},
        "recomputed": {r["id"]: r["fresh"] for r in results if r["fresh"]},
        "wall_time_s": {"subjects": t_cls - t_start, "classification": t_end - t_cls,
                        "total": t_end - t_start},
        "best_depth": best_depth(rows),
        "versions": {"motionpet": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "workers": workers,
        "cpu_count": os.cpu_count(),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return run_dir


def load_records(run_dir: Path) -> list[phantom.SubjectRecord]:
    path = Path(run_dir) / "cohort.json"
    if not path.exists():
        raise MissingStageError(f"{run_dir}: no cohort.json")
    return [phantom.SubjectRecord(**d) for d in json.loads(path.read_text())]


def ablate(cfg: ExperimentConfig, run_dir, C_values=(0.1, 1.0, 10.0), train_on=("mc", "nmc")) -> Path:
    """Refit classifiers on cached features for each (C, training mode) pair.

    Reconstructions and features are read from a completed run and never
    recomputed. Each variant writes its own report under ``ablations/``;
    ``ablation.csv`` collects all rows with the variant columns prepended.
    """
    run_dir = Path(run_dir)
    _check_manifest(run_dir, cfg)
    records = load_records(run_dir)
    out = run_dir / "ablations"
    out.mkdir(exist_ok=True)
    summary = []
    for C in C_values:
        for mode in train_on:
            variant = replace(cfg, experiment=replace(cfg.experiment, train_on=mode))
            tag = f"C{C:g}_train-{mode}"
            rows = fit_and_evaluate(variant, run_dir, records, out_dir=out / tag, C=C)
            summary += [{"C": repr(float(C)), "train_on": mode, **r} for r in rows]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["C", "train_on"] + REPORT_COLUMNS)
        w.writeheader()
        for r in summary:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return out
