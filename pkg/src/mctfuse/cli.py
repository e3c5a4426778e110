"""Command-line interface: synth, train, eval, gradcheck and ablate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .ablate import DEFAULT_GRID, run_ablation
from .checkpoint import config_hash
from .data import SynthConfig, generate_dataset, read_dataset, write_dataset
from .gradsuite import CASES, TOLERANCE, run_suite
from .metrics import BASELINES, EVAL_SPLITS, baseline_predict, protocol_evaluate
from .train import TrainConfig, evaluate_checkpoint, train_pipeline
from .video import NUM_LABELS

log = logging.getLogger("mctfuse")


def _load_config(path: str | None) -> TrainConfig:
    return TrainConfig() if path is None else TrainConfig.from_json(path)


def cmd_synth(args) -> int:
    cfg = SynthConfig(seed=args.seed, n_known=args.archetypes_known, n_new=args.archetypes_new,
                      samples_per_archetype=args.samples_per)
    ds = generate_dataset(cfg)
    write_dataset(ds, args.out)
    counts = {s: len(ds.indices(s)) for s in ("train",) + EVAL_SPLITS}
    log.info("wrote %d samples to %s %s", len(ds.ids), args.out, counts)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    ds = read_dataset(args.data)
    final = train_pipeline(cfg, ds, args.out, stage=args.stage, resume=args.resume, log=log.info)
    log.info("final checkpoint: %s", final)
    return 0


def cmd_eval(args) -> int:
    ds = read_dataset(args.data)
    if args.ckpt is not None:
        report = evaluate_checkpoint(args.ckpt, ds)
    else:
        idx = np.concatenate([ds.indices(s) for s in EVAL_SPLITS])
        tags = np.concatenate([[s] * len(ds.indices(s)) for s in EVAL_SPLITS])
        scores = baseline_predict(args.baseline, len(idx), NUM_LABELS, args.seed)
        meta = {"source": "baseline", "baseline": args.baseline, "seed": args.seed,
                "data_config_hash": config_hash(ds.config.to_dict())}
        report = protocol_evaluate(scores, ds.labels[idx], tags, meta, NUM_LABELS)
    report.save(args.report)
    for name in ("known_val", "new_val", "mean_val", "known_test", "new_test", "mean_test"):
        print(f"{name:11s} {getattr(report, name):.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.instances, args.seed, args.ops)
    for r in results:
        print(f"{r.name:24s} max_rel_err={r.max_rel_err:.3e} {'ok' if r.passed else 'FAIL'}")
    if args.report:
        rows = [{"op": r.name, "instances": r.instances, "max_rel_err": r.max_rel_err, "passed": r.passed}
                for r in results]
        Path(args.report).write_text(json.dumps({"tolerance": TOLERANCE, "results": rows}, indent=1) + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    ds = read_dataset(args.data)
    reports = run_ablation(cfg, ds, args.out, args.grid, resume=args.resume, log=log.info)
    log.info("wrote %d cell reports under %s", len(reports), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mctfuse", description=__doc__)
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic two-modality dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--archetypes-known", type=int, default=24, help="activity types seen in training")
    s.add_argument("--archetypes-new", type=int, default=6, help="held-out activity types")
    s.add_argument("--samples-per", type=int, default=20, help="samples per activity type")
    s.add_argument("--out", required=True, help="dataset directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="two-stage training")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON file of TrainConfig keys (defaults when omitted)")
    t.add_argument("--out", required=True)
    t.add_argument("--stage", choices=("1", "2", "all"), default="all")
    t.add_argument("--resume", action="store_true", help="continue from checkpoints found under --out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a baseline under the known/new protocol")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--baseline", choices=BASELINES)
    e.add_argument("--seed", type=int, default=0, help="seed of the random baseline")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="CSV path; a JSON copy is written alongside")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite in float64")
    g.add_argument("--instances", type=int, default=100, help="random instances per case")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ops", nargs="+", choices=sorted(CASES), metavar="CASE",
                   help="subset of cases: " + ", ".join(sorted(CASES)))
    g.add_argument("--report", help="write results as JSON")
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train and evaluate an ablation grid")
    a.add_argument("--data", required=True)
    a.add_argument("--config", help="base TrainConfig JSON")
    a.add_argument("--out", required=True)
    a.add_argument("--grid", default=DEFAULT_GRID,
                   help="axes (toggles, placements, fusions) joined by 'x'; commas union several terms")
    a.add_argument("--resume", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"mctfuse {args.command}: error: {exc}", file=sys.stderr)
        return 1
