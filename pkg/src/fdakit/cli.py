"""Command-line entry point: ``fdakit {train,attack,eval,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .harness import ConfigError, ExperimentConfig

_CT_CHOICES = {"mean": "spatial-mean", "median": "median", "iqm": "iqm"}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="experiment config (JSON); flags override its fields")
    p.add_argument("--model", help="checkpoint path (attack/eval) or architecture name (train)")
    p.add_argument("--dataset", choices=["mnist", "cifar10"])
    p.add_argument("--data-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")


def _attack_flags(p: argparse.ArgumentParser):
    p.add_argument("--method", choices=["fda", "pgd-ml", "pgd-ll", "pgd-cw"])
    p.add_argument("--eps", type=float, help="L-inf radius in 0-255 pixel units")
    p.add_argument("--nb-iter", type=int)
    p.add_argument("--eps-iter", type=float, help="per-step size in 0-255 pixel units")
    p.add_argument("--central-tendency", choices=sorted(_CT_CHOICES))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdakit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier and write a checkpoint")
    _common(p)
    _attack_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--shift", type=int, help="random translation augmentation, pixels")
    p.add_argument("--adversarial", action="store_true",
                   help="replace half of every batch with PGD-ML adversaries")

    p = sub.add_parser("attack", help="attack a seed-pinned test subset")
    _common(p)
    _attack_flags(p)
    p.add_argument("--n-images", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-archive", action="store_true", help="skip writing the adversary archive")

    p = sub.add_parser("eval", help="metrics, FR@k and feature statistics for an attack run")
    p.add_argument("run", help="attack output directory")
    p.add_argument("--model", help="override the checkpoint recorded in the archive")
    p.add_argument("--k-max", type=int, default=10)
    p.add_argument("--transfer-models", nargs="*", default=[])
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("report", help="merge runs that share a budget")
    p.add_argument("runs", nargs="+", help="run directories, or one parent directory")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else ExperimentConfig()
    if args.model:
        cfg.model = args.model
    if args.dataset:
        cfg.dataset = args.dataset
    if args.data_dir:
        cfg.data_dir = args.data_dir
    if args.out:
        cfg.output = args.out
    if args.seed is not None:
        cfg.eval.seed = args.seed
        cfg.train.seed = args.seed
        cfg.train.init_seed = args.seed
    a = cfg.attack
    if getattr(args, "method", None):
        a.method = args.method
    if getattr(args, "eps", None) is not None:
        a.eps = args.eps
    if getattr(args, "nb_iter", None) is not None:
        a.nb_iter = args.nb_iter
    if getattr(args, "eps_iter", None) is not None:
        a.eps_iter = args.eps_iter
    if getattr(args, "central_tendency", None):
        a.central_tendency = _CT_CHOICES[args.central_tendency]
    if getattr(args, "n_images", None) is not None:
        cfg.eval.n_images = args.n_images
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    t = cfg.train
    for name in ("epochs", "batch_size", "lr", "momentum", "shift"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(t, name, val)
    if getattr(args, "adversarial", False):
        t.adversarial = True
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("train", "attack"):
            cfg = resolve_config(args)
            # budget is validated once here, before any work starts
            cfg.budget()
            print(json.dumps({"command": args.command, "config": cfg.to_dict()}, sort_keys=True))
            if args.command == "train":
                doc = harness.run_train(cfg)
                print(json.dumps({"test_accuracy": doc["test_accuracy"]}))
            else:
                summary = harness.run_attack_cmd(cfg, save_archive=not args.no_archive)
                print(json.dumps(summary["metrics"], sort_keys=True))
        elif args.command == "eval":
            doc = harness.run_eval_cmd(args.run, args.out, args.model, args.k_max, args.transfer_models)
            print(json.dumps(doc, sort_keys=True))
        elif args.command == "report":
            rows = harness.run_report_cmd(args.runs, args.out)
            print(json.dumps(rows, sort_keys=True))
    except (ConfigError, harness.BudgetMismatchError, FileNotFoundError, ValueError) as exc:
        print(f"fdakit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
