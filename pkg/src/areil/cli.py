"""Command-line entry point: prepare / train / evaluate / ablate / export / probe.

Exit codes: 0 success, 1 internal error, 2 input error, 3 checkpoint error.
AREIL_LOG in {error, info, debug} controls verbosity.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

from areil import corpus, evalkit, trainer
from areil.config import load_config
from areil.errors import AreilError, CheckpointError, InputError
from areil.model import VARIANTS, Model

log = logging.getLogger("areil.cli")


def _configure_logging():
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("AREIL_LOG", "info").lower(), logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load_split_and_graphs(manifest_dir):
    split = corpus.load_manifest(manifest_dir)
    graphs = {
        tag: corpus.build_graph(
            split.train[tag],
            len(split.dataset.shared_users),
            len(split.dataset.domain(tag).items),
        )
        for tag in ("x", "y")
    }
    return split, graphs


def _build_model(run_cfg, split):
    return Model(
        run_cfg.model_config(),
        num_users=len(split.dataset.shared_users),
        num_items_x=len(split.dataset.domain_x.items),
        num_items_y=len(split.dataset.domain_y.items),
        seed=run_cfg.seed,
    )


def _apply_overrides(run_cfg, args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "k", None) is not None:
        overrides["k"] = args.k
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    return run_cfg.replace(**overrides) if overrides else run_cfg


def _worker_count(run_cfg):
    """threads = 0 means every available core."""
    return run_cfg.threads if run_cfg.threads > 0 else (os.cpu_count() or 1)


def command_prepare(args):
    ds_x = corpus.ingest_interactions(args.raw_x, args.threshold, args.delimiter)
    ds_y = corpus.ingest_interactions(args.raw_y, args.threshold, args.delimiter)
    cds = corpus.align_overlapping_users(ds_x, ds_y)
    split = corpus.split_holdout(cds, args.seed)
    out = corpus.write_manifest(split, args.out)
    stats = corpus.summarize(split)
    raw_counts = (
        f"raw records: x={ds_x.raw_records} y={ds_y.raw_records} "
        f"(collapsed to {ds_x.num_interactions}/{ds_y.num_interactions} "
        "before overlap filtering)"
    )
    (out / "stats.txt").write_text(stats + "\n" + raw_counts + "\n", encoding="utf-8")
    print(stats)
    print(raw_counts)
    return 0


def command_train(args):
    run_cfg = _apply_overrides(load_config(args.config), args)
    split, graphs = _load_split_and_graphs(run_cfg.manifest_dir)
    model = _build_model(run_cfg, split)
    history, best_epoch = trainer.fit(model, split, graphs, run_cfg, eval_k=run_cfg.k)

    out = Path(run_cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = run_cfg.digest()
    trainer.save_checkpoint(model, run_cfg, out / "checkpoint.bin")
    trainer.write_history(history, out / "history.csv", digest=digest)
    report = evalkit.evaluate(
        model, graphs, split, "validation", k=run_cfg.k,
        threads=_worker_count(run_cfg),
        seed=run_cfg.seed, variant=run_cfg.variant, config_digest=digest,
    )
    (out / "validation_report.txt").write_text(report.to_text(), encoding="utf-8")
    print(f"best epoch: {best_epoch}")
    print(report.to_text(), end="")
    return 0


def command_evaluate(args):
    run_cfg, model = trainer.load_checkpoint(args.checkpoint)
    run_cfg = _apply_overrides(run_cfg, args)
    split, graphs = _load_split_and_graphs(run_cfg.manifest_dir)
    report = evalkit.evaluate(
        model, graphs, split, args.split, k=run_cfg.k,
        threads=_worker_count(run_cfg),
        seed=run_cfg.seed, variant=run_cfg.variant, config_digest=run_cfg.digest(),
    )
    print(report.to_text(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"report_{args.split}.txt").write_text(
            report.to_text(), encoding="utf-8"
        )
        (out / f"report_{args.split}.csv").write_text(
            evalkit.EvalReport.summary_header() + "\n" + report.summary_row() + "\n",
            encoding="utf-8",
        )
    return 0


def command_ablate(args):
    run_cfg = _apply_overrides(load_config(args.config), args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise InputError(
            f"unknown variants {unknown}; valid names: {', '.join(VARIANTS)}"
        )
    split, graphs = _load_split_and_graphs(run_cfg.manifest_dir)
    reports = evalkit.run_ablation(
        split, graphs, run_cfg, variants, part=args.split, k=run_cfg.k
    )
    table = evalkit.ablation_table(reports)
    print(table, end="")
    out = Path(run_cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(table, encoding="utf-8")
    return 0


def command_export(args):
    run_cfg, model = trainer.load_checkpoint(args.checkpoint)
    split, graphs = _load_split_and_graphs(run_cfg.manifest_dir)
    paths = evalkit.export_embeddings(model, graphs, split.dataset, args.out)
    for p in paths:
        print(p)
    return 0


def command_probe(args):
    run_cfg, model = trainer.load_checkpoint(args.checkpoint)
    run_cfg = _apply_overrides(run_cfg, args)
    split, graphs = _load_split_and_graphs(run_cfg.manifest_dir)
    acc_specific, acc_shared = evalkit.disentanglement_probe(
        model, graphs, seed=run_cfg.seed
    )
    print(f"probe_accuracy_specific: {acc_specific:.4f}")
    print(f"probe_accuracy_shared: {acc_shared:.4f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="areil",
        description="dual-domain recommendation engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest, align, split, and write a manifest")
    p.add_argument("--raw-x", required=True, help="domain x rating log")
    p.add_argument("--raw-y", required=True, help="domain y rating log")
    p.add_argument("--out", required=True, help="manifest output directory")
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--threshold", type=float, default=0.0,
                   help="minimum rating counted as a positive interaction")
    p.set_defaults(fn=command_prepare)

    p = sub.add_parser("train", help="train on a prepared manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", help="output directory (overrides config)")
    p.set_defaults(fn=command_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("validation", "test"), default="test")
    p.add_argument("--k", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=command_evaluate)

    p = sub.add_parser("ablate", help="train and compare model variants")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--split", choices=("validation", "test"), default="test")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=command_ablate)

    p = sub.add_parser("export", help="export user/item embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=command_export)

    p = sub.add_parser("probe", help="disentanglement probe on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=command_probe)
    return parser


def main(argv=None):
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except AreilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
