"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Every file written
is printed to stdout, one path per line.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .errors import CtxFusionError
from .harness import ExperimentConfig, Lab

COMMANDS = {
    "gen": "generate the composite dataset and both pretraining corpora",
    "pretrain": "pretrain and freeze the fg and bg extractors",
    "train": "train the classifier heads listed in the config",
    "eval": "clean accuracy of every model on every split",
    "sweep-blur": "accuracy under bbox and whole-image blur over the sigma grid",
    "sweep-fgsm": "accuracy under fg-sourced FGSM over the epsilon grid",
    "sweep-alpha": "joint models retrained over the alpha grid, plus adversarial retraining",
    "pca": "feature subspace shift of fg and bg under bbox blur",
    "cam": "Grad-CAM maps and mass inside the bounding box",
    "report": "concatenate every CSV under --out into summary.csv",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p = _Parser(prog="ctxfusion", description="Object/context fusion robustness experiments.",
                parents=[common])
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, text in COMMANDS.items():
        sub.add_parser(name, help=text, description=text, parents=[common])
    return p


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg.out = str(args.out)
    return cfg


def run(args) -> list[Path]:
    if args.command == "report":
        out = args.out or Path(_config(args).out)
        path, _ = harness.run_report(out)
        return [path]
    lab = Lab(_config(args))
    if args.command == "gen":
        lab.generate()
    elif args.command == "pretrain":
        lab.pretrain()
    elif args.command == "train":
        lab.train()
    elif args.command == "eval":
        harness.run_eval(lab)
    elif args.command == "sweep-blur":
        harness.run_blur_sweep(lab)
    elif args.command == "sweep-fgsm":
        harness.run_fgsm_sweep(lab)
    elif args.command == "sweep-alpha":
        harness.run_alpha_sweep(lab)
    elif args.command == "pca":
        harness.run_pca(lab)
    elif args.command == "cam":
        harness.run_cam(lab)
    return lab.written


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "ctxfusion: error: a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        paths = run(args)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    except (CtxFusionError, OSError) as e:
        print(f"ctxfusion: error: {e}", file=sys.stderr)
        return 2
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
