"""Command line: ``pstr {gendata,train,eval,gradcheck}``.

Exit codes: 0 success, 1 runtime failure (I/O, NaN loss, failed gradient
check), 2 validation failure (bad config, bad flag, checkpoint mismatch).
Every output directory receives ``config.toml`` (the effective config) and
``VERSION``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from . import gradcheck
from . import numerics as nx
from .config import ConfigError, RunConfig, load_config, override
from .data import DataConfigError, FormatError, GenerationError, generate_dataset, load_dataset, save_dataset
from .model import PSTR, CheckpointError, ModelConfig, load_parameters, read_archive
from .train import Trainer, TrainingError, run_training

log = logging.getLogger("pstr")

VALIDATION_ERRORS = (ConfigError, DataConfigError, CheckpointError)
RUNTIME_ERRORS = (OSError, FormatError, GenerationError, TrainingError)


def _csv_list(kind):
    def parse(text: str):
        try:
            return tuple(kind(x) for x in text.split(",") if x.strip())
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run config (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="seed of the stage this command runs")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--variant", choices=("single", "parallel", "shared"))
    model.add_argument("--scales", type=_csv_list(str), help="comma list, e.g. P2,P3,P4")
    model.add_argument("--data", type=Path, help="dataset directory (overrides paths.data)")

    p = argparse.ArgumentParser(prog="pstr", description="One-step transformer person search on synthetic scenes.")
    p.add_argument("--version", action="version", version=f"pstr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gendata", parents=[common], help="render the synthetic dataset")
    t = sub.add_parser("train", parents=[common, model], help="train a model")
    t.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")
    t.add_argument("--steps", type=int, help="override train.steps")
    e = sub.add_parser("eval", parents=[common, model], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--gallery-sizes", type=_csv_list(int), help="comma list, e.g. 5,10,25,50")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every differentiable op")
    g.add_argument("--instances", type=int)
    g.add_argument("--only", type=_csv_list(str), help="comma list of operation names")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "variant", None):
        changes["reid.variant"] = args.variant
    if getattr(args, "scales", None):
        changes["reid.scales"] = args.scales
    if getattr(args, "data", None):
        changes["paths.data"] = str(args.data)
    if getattr(args, "checkpoint", None):
        changes["paths.checkpoint"] = str(args.checkpoint)
    if getattr(args, "gallery_sizes", None):
        changes["eval.gallery_sizes"] = args.gallery_sizes
    if getattr(args, "steps", None):
        changes["train.steps"] = args.steps
    if getattr(args, "instances", None):
        changes["gradcheck.instances"] = args.instances
    if args.out is not None:
        changes["paths.data" if args.command == "gendata" else "paths.out"] = str(args.out)
    if args.seed is not None:
        stage = {"gendata": "data", "train": "train", "eval": "train", "gradcheck": "gradcheck"}[args.command]
        changes[f"{stage}.seed"] = args.seed
    return override(cfg, **changes) if changes else cfg


def write_provenance(out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.to_toml())
    (out / "VERSION").write_text(f"pstr {__version__}\n")


# -- commands ----------------------------------------------------------------
def cmd_gendata(cfg: RunConfig) -> int:
    out = Path(cfg.paths.data)
    ds = generate_dataset(cfg.data)
    save_dataset(ds, out)
    write_provenance(out, cfg)
    print(f"wrote {len(ds.train)} train + {len(ds.test)} test scenes, {len(ds.queries)} queries to {out}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    ds = load_dataset(cfg.paths.data)
    out = Path(cfg.paths.out)
    write_provenance(out, cfg)
    trainer = Trainer(cfg.model, cfg.loss, cfg.train, ds)
    if cfg.paths.checkpoint:
        _check_model_matches(cfg.model, read_archive(cfg.paths.checkpoint)[1], cfg.paths.checkpoint)
        trainer.load(cfg.paths.checkpoint)
        log.info("resumed from %s at step %d", cfg.paths.checkpoint, trainer.step_idx)
    try:
        final = run_training(trainer, out)
    except TrainingError as exc:
        (out / "nan_dump.json").write_text(json.dumps({"error": str(exc), "step": trainer.step_idx, "seed": cfg.train.seed}, indent=1))
        raise
    print(f"trained to step {trainer.step_idx}; final checkpoint {final}")
    return 0


def _check_model_matches(want: ModelConfig, meta: dict, path) -> None:
    have = ModelConfig.from_dict(meta["model"])
    if have.reid.variant != want.reid.variant:
        raise CheckpointError(
            f"re-id variant mismatch: checkpoint {path} was trained with {have.reid.variant!r}, config requests {want.reid.variant!r}"
        )
    diffs = []
    for section in ("detector", "reid"):
        a, b = getattr(have, section).__dict__, getattr(want, section).__dict__
        diffs += [f"{section}.{k}: checkpoint {a[k]!r} vs config {b[k]!r}" for k in a if a[k] != b[k]]
    if diffs:
        raise CheckpointError(f"checkpoint {path} does not match the config: " + "; ".join(diffs))


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.paths.checkpoint:
        raise ConfigError("eval needs --checkpoint (or paths.checkpoint)")
    entries, meta = read_archive(cfg.paths.checkpoint)
    _check_model_matches(cfg.model, meta, cfg.paths.checkpoint)
    ds = load_dataset(cfg.paths.data)
    avail = min(len(g) for g in ds.galleries.values())
    bad = [s for s in cfg.eval.gallery_sizes if s > avail]
    if bad:
        raise ConfigError(f"gallery sizes {bad} exceed the {avail} scenes available per query")
    dtype = np.float32 if cfg.train.precision == "float32" else np.float64
    with nx.default_dtype(dtype):
        model = PSTR(cfg.model)
        load_parameters(model, entries)
        preds = ev.predict_test_split(model, ds, cfg.eval.batch_size)
    det_ap = ev.detection_ap(ds, preds)
    results = ev.gallery_size_sweep(ds, preds, cfg.eval.gallery_sizes, cfg.eval.score_thresh, cfg.eval.iou_thresh)
    out = Path(cfg.paths.out)
    write_provenance(out, cfg)
    ev.write_results_csv(out / "results.csv", results)
    ev.write_summary_csv(out / "summary.csv", results, det_ap)
    print(f"detection AP@0.5 {det_ap:.4f}")
    for r in results:
        print(f"gallery {r.gallery_size:>3}: mAP {r.mAP:.4f} top-1 {r.top1:.4f}")
    return 0


def cmd_gradcheck(cfg: RunConfig, only=None) -> int:
    results = gradcheck.run_gradcheck(cfg.gradcheck.instances, cfg.gradcheck.seed, only=list(only) if only else None)
    print(gradcheck.format_report(results))
    out = Path(cfg.paths.out)
    write_provenance(out, cfg)
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["operation", "instances", "max_rel_error", "seconds", "passed"])
        for r in results:
            w.writerow([r.name, r.instances, f"{r.max_rel_error:.6e}", f"{r.seconds:.3f}", int(r.passed)])
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} operations within {gradcheck.TOL:g}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gendata":
            return cmd_gendata(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        return cmd_gradcheck(cfg, args.only)
    except VALIDATION_ERRORS as exc:
        print(f"pstr {args.command}: invalid: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"pstr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
