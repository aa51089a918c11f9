"""Command-line interface.

Exit codes: 0 success, 2 configuration error (including a run directory
produced by a different configuration), 3 runtime stage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .. import classify, features, metrics, motion, phantom, recon, simulate
from ..errors import ConfigError, HashMismatchError
from ..seeding import substream
from ..volume import read_volume, write_volume
from . import pipeline
from .config import ExperimentConfig, load_config, smoke_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="INI-style experiment config")
    parser.add_argument("--seed", type=int, default=default, help="master seed override")
    parser.add_argument("--out", type=Path, default=default, help="output directory or file")
    parser.add_argument("--workers", type=int, default=default, help="subject worker pool width")
    parser.add_argument("--smoke", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="use the small smoke-test configuration")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motionpet", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help):
        sp = sub.add_parser(name, help=help)
        _global_flags(sp, suppress=True)
        return sp

    sp = add("phantom", "write one activity/attenuation phantom pair")
    sp.add_argument("--label", choices=phantom.LABELS, default="CN")
    sp.add_argument("--subject-seed", type=int, default=0)

    sp = add("trace", "generate a rigid motion trace CSV")
    sp.add_argument("--kind", choices=motion.TRACE_KINDS, default="mixed")
    sp.add_argument("--amplitude", type=float, default=7.0, help="mm")
    sp.add_argument("--segments", type=int, default=12)
    sp.add_argument("--duration", type=float, default=1200.0, help="s")

    sp = add("simulate", "simulate list-mode events for a phantom and trace")
    sp.add_argument("--activity", type=Path, required=True)
    sp.add_argument("--attenuation", type=Path, required=True)
    sp.add_argument("--trace", type=Path, help="motion trace CSV (default: static)")
    sp.add_argument("--events", type=int)

    sp = add("recon", "list-mode OSEM reconstruction")
    sp.add_argument("--events", type=Path, required=True)
    sp.add_argument("--attenuation", type=Path, required=True)
    sp.add_argument("--trace", type=Path)
    sp.add_argument("--mode", choices=("mc", "nmc"), default="mc")

    sp = add("extract", "encoder features of a reconstruction")
    sp.add_argument("--recon", type=Path, required=True)
    sp.add_argument("--label", choices=phantom.LABELS, default="CN")
    sp.add_argument("--subject-id", default="")

    sp = add("train", "fit an SVM (or the linear head) on feature CSVs")
    sp.add_argument("features", type=Path, nargs="+")
    sp.add_argument("--depth", type=int, default=4)
    sp.add_argument("--C", type=float)
    sp.add_argument("--head", action="store_true", help="train the logistic linear head instead")

    sp = add("evaluate", "score feature CSVs with a trained model")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("features", type=Path, nargs="+")

    sp = add("ablate", "refit classifiers on a completed run for several C and training modes")
    sp.add_argument("--run", type=Path, help="run directory (default: --out or config output_dir)")
    sp.add_argument("--C", type=float, nargs="+", default=[0.1, 1.0, 10.0])
    sp.add_argument("--train-on", nargs="+", choices=("mc", "nmc"), default=["mc", "nmc"])

    sp = add("report", "print the ablation table of a completed run")
    sp.add_argument("--run", type=Path)

    add("run", "full pipeline")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.smoke:
        cfg = smoke_config(cfg)
    exp = cfg.experiment
    if args.seed is not None:
        exp = replace(exp, master_seed=args.seed)
    if args.workers is not None:
        exp = replace(exp, workers=args.workers)
    if args.out is not None and args.command in ("run", "ablate", "report"):
        exp = replace(exp, output_dir=str(args.out))
    try:
        return replace(cfg, experiment=exp)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _out(args, default: str) -> Path:
    path = Path(args.out) if args.out else Path(default)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _read_rows(paths, depth=None):
    rows = []
    for p in paths:
        rows += [(fv, lab) for fv, lab in features.read_features(p) if depth is None or fv.depth == depth]
    return rows


def dispatch(args, cfg: ExperimentConfig) -> int:
    seed = cfg.experiment.master_seed
    cmd = args.command
    if cmd == "run":
        run_dir = pipeline.run_pipeline(cfg)
        print(pipeline.report_table(run_dir))
        print(f"run directory: {run_dir}")
    elif cmd == "report":
        print(pipeline.report_table(args.run or cfg.experiment.output_dir))
    elif cmd == "ablate":
        out = pipeline.ablate(cfg, args.run or cfg.experiment.output_dir, tuple(args.C), tuple(args.train_on))
        print(f"ablation results: {out / 'ablation.csv'}")
    elif cmd == "phantom":
        out = _out(args, "phantom")
        out.mkdir(exist_ok=True)
        act, mu = phantom.make_phantom(cfg.phantom.params(), args.label, args.subject_seed,
                                       cfg.recon.dims, cfg.recon.voxel_mm)
        write_volume(act, out / "activity.pvol")
        write_volume(mu, out / "attenuation.pvol")
        print(out)
    elif cmd == "trace":
        tr = motion.gen_trace(args.kind, args.amplitude, args.segments, args.duration, seed)
        out = _out(args, "trace.csv")
        motion.write_trace(tr, out)
        print(f"{out}: motion magnitude {motion.motion_magnitude(tr):.3f} mm")
    elif cmd == "simulate":
        act, mu = read_volume(args.activity), read_volume(args.attenuation)
        tr = motion.read_trace(args.trace) if args.trace else motion.identity_trace(cfg.cohort.duration_s)
        n = args.events if args.events is not None else cfg.simulate.events
        ev = simulate.simulate_listmode(act, mu, tr, cfg.scanner, n, substream(seed, "simulate"),
                                        duration_s=tr.duration_s, chunk_events=cfg.simulate.chunk_events)
        out = _out(args, "events.plm")
        simulate.write_listmode(ev, out)
        print(f"{out}: {len(ev)} events")
    elif cmd == "recon":
        ev = simulate.read_listmode(args.events)
        mu = read_volume(args.attenuation)
        tr = motion.read_trace(args.trace) if (args.trace and args.mode == "mc") else None
        rcfg = replace(cfg.recon.config(), dims=mu.dims, voxel_mm=mu.voxel_mm)
        vol = recon.osem_listmode(ev, cfg.scanner, mu, tr, rcfg, cfg.recon.sensitivity_seed)
        out = _out(args, f"recon_{args.mode}.pvol")
        recon.write_recon(vol, out, config=rcfg, mode=args.mode.upper(), events_used=len(ev), wall_time_s=0.0)
        print(out)
    elif cmd == "extract":
        ecfg = cfg.features.config()
        vol = features.prepare_input(read_volume(args.recon), ecfg.input_dim, cfg.features.prefilter_fwhm_mm)
        fvs = features.extract_features(vol, ecfg, args.subject_id)
        out = _out(args, "features.csv")
        features.write_features([(fv, args.label) for fv in fvs], out)
        print(out)
    elif cmd == "train":
        rows = _read_rows(args.features, args.depth)
        X, y = zip(*rows)
        cl = cfg.classify
        if args.head:
            model = classify.head_train(list(X), list(y), cl.head_lr, cl.head_epochs, cl.head_l2)
        else:
            C = args.C if args.C is not None else cl.C
            model = classify.svm_train(list(X), list(y), C=C, tol=cl.tol, max_epochs=cl.max_epochs)
        out = _out(args, "model.json")
        classify.save_model(model, out)
        print(out)
    elif cmd == "evaluate":
        model = classify.load_model(args.model)
        rows = _read_rows(args.features, model.depth)
        fv, labels = zip(*rows)
        rep = metrics.evaluate(classify.svm_score(model, [f.values for f in fv]), labels)
        text = json.dumps(rep.as_dict(), indent=1)
        if args.out:
            _out(args, "").write_text(text + "\n")
        print(text)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return dispatch(args, cfg)
    except (ConfigError, HashMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any stage failure maps to one exit code
        logging.getLogger(__name__).debug("stage failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
