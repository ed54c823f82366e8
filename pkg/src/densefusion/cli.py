"""``densefusion <generate|train|eval|bench> --config <path> [--variant X] [--checkpoint path] [--seed n]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .exceptions import DenseFusionError
from .harness import RunConfig, cmd_bench, cmd_eval, cmd_generate, cmd_train
from .pipeline import VARIANTS


def build_parser():
    parser = argparse.ArgumentParser(prog="densefusion", description="Dense-fusion 6D pose estimation")
    parser.add_argument("command", choices=["generate", "train", "eval", "bench"])
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--variant", choices=VARIANTS, help="evaluation variant (eval only)")
    parser.add_argument("--checkpoint", help="checkpoint to evaluate, benchmark or resume from")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = RunConfig.load(args.config).with_seed(args.seed)
        if args.command == "generate":
            run = cmd_generate(config)
        elif args.command == "train":
            run = cmd_train(config, args.checkpoint)
        elif args.command == "eval":
            run = cmd_eval(config, args.checkpoint, args.variant)
        else:
            run = cmd_bench(config, args.checkpoint)
    except DenseFusionError as exc:
        print(f"densefusion: error: {exc}", file=sys.stderr)
        return 2
    print(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
