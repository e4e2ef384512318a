import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

# Ensure project root is importable even if run from another directory
sys.path.insert(0, str(Path(__file__).parent.resolve()))

import config

THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitweight", description="1-bit-per-weight wide residual networks")
    parser.add_argument("--log-level", default=config.LOG_LEVEL, choices=["debug", "info", "warning", "error"])
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write log, checkpoint and packed model")
    p.add_argument("--config", dest="config_path")
    p.add_argument("--data-dir", default=None, help=f"dataset directory (default ${config.DATA_DIR_ENV})")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["full", "1bit"])
    p.add_argument("--epochs", type=int, help="cumulative cycle end: 2, 6, 14, 30, 62, 126 or 254")
    p.add_argument("--cutout", type=int, help="cutout patch size, 0 disables")

    p = sub.add_parser("eval", help="top-1/top-5 error of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--data-dir", default=None)

    p = sub.add_parser("export", help="write the packed 1-bit model of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", default=None)

    p = sub.add_parser("infer", help="class probabilities for one image")
    p.add_argument("packed")
    p.add_argument("image")

    p = sub.add_parser("inspect", help="dump header, layer records and size audit of a packed model")
    p.add_argument("packed")
    return parser


def thread_count(args: argparse.Namespace) -> Optional[int]:
    """--threads, else the "threads" field of the train config, else None."""
    if args.threads is not None:
        return args.threads
    config_path = getattr(args, "config_path", None)
    if not config_path:
        return None
    try:
        data = json.loads(Path(config_path).expanduser().read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return None  # the train command reports the bad config
    threads = data.get("threads") if isinstance(data, dict) else None
    if isinstance(threads, bool) or not isinstance(threads, int) or threads < 1:
        return None
    return threads


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = thread_count(args)
    # BLAS reads these once, at numpy import
    if threads is not None:
        for name in THREAD_ENV_VARS:
            os.environ[name] = str(threads)
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    import controller

    if args.command == "train":
        return controller.cmd_train(
            config_path=args.config_path,
            data_dir=args.data_dir,
            out_dir=args.out_dir,
            seed=args.seed,
            threads=args.threads,
            mode=args.mode,
            epochs=args.epochs,
            cutout=args.cutout,
        )
    if args.command == "eval":
        return controller.cmd_eval(args.checkpoint, args.split, args.data_dir)
    if args.command == "export":
        return controller.cmd_export(args.checkpoint, args.out)
    if args.command == "infer":
        return controller.cmd_infer(args.packed, args.image)
    return controller.cmd_inspect(args.packed)


if __name__ == "__main__":
    sys.exit(main())
