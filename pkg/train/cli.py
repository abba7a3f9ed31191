# train/cli.py
"""
Command-line driver.

  python -m train.cli train  [flags]
  python -m train.cli eval   --checkpoint runs/x/checkpoint.celp [flags]
  python -m train.cli mine   feature_m.celp feature_h.celp mask.celp [flags]
  python -m train.cli ablate --study delta|weight|kshot [--all-folds] [--seeds N] [flags]
  python -m train.cli report RUN_DIR [RUN_DIR ...] --out DIR

Exit codes: 0 success, 1 unexpected error, 2 config error,
3 format/checkpoint error, 4 no latent region found by mine.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from scripts.config import FUSIONS, RunConfig, build_config
from scripts.episodes import DISTRACTOR_MODES
from scripts.errors import CheckpointError, ConfigError, DimensionError, EmptyCandidateError, TensorFormatError
from scripts.utils import setup_logging

from .ablate import STUDIES, cmd_ablate
from .evaluate import cmd_eval
from .export_report import cmd_report
from .make_pseudo import cmd_mine
from .train_episodic import cmd_train

logger = logging.getLogger("celp.cli")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_FORMAT, EXIT_NO_LATENT = 0, 1, 2, 3, 4

# flag -> (RunConfig field, type)
RUN_FLAGS = {
    "--seed": ("seed", int),
    "--fold": ("fold", int),
    "--k": ("k", int),
    "--delta": ("delta", float),
    "--sigma": ("sigma", int),
    "--eps": ("eps", float),
    "--w-ce": ("w_ce", float),
    "--w-aux": ("w_aux", float),
    "--steps": ("total_steps", int),
    "--lr": ("base_lr", float),
    "--episodes": ("episode_count", int),
    "--distractors": ("distractors", str),
    "--fusion": ("fusion", str),
    "--precision": ("precision", str),
    "--threads": ("threads", int),
    "--log-every": ("log_every", int),
    "--out": ("out", str),
}
CHOICES = {"--fold": [0, 1, 2, 3], "--fusion": list(FUSIONS), "--precision": ["f32", "f64"],
           "--distractors": list(DISTRACTOR_MODES)}


def _run_options() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help="key=value config file; flags override its values")
    for flag, (name, typ) in RUN_FLAGS.items():
        info = RunConfig.model_fields[name]
        parent.add_argument(flag, dest=name, type=typ, default=None, choices=CHOICES.get(flag),
                            help=f"{info.description} (default: {info.default})")
    parent.add_argument("--no-ce", dest="ce_enabled", action="store_const", const=False, default=None,
                        help="disable the contrastive-enhancement path")
    parent.add_argument("--per-episode-miou", dest="per_episode_miou", action="store_const", const=True,
                        default=None, help="average per-episode IoUs instead of pooling per class")
    return parent


def build_parser() -> argparse.ArgumentParser:
    run = _run_options()
    ap = argparse.ArgumentParser(prog="celp", description="Few-shot segmentation with latent-prototype "
                                 "contrastive enhancement on a synthetic benchmark")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[run], help="episodic training; writes checkpoint and loss.csv")

    p = sub.add_parser("eval", parents=[run], help="episodic evaluation; writes metrics.csv")
    p.add_argument("--checkpoint", required=True, type=Path)

    p = sub.add_parser("mine", parents=[run], help="latent prototype sampling on stored tensors")
    p.add_argument("feature_m", type=Path, help="mid-level features (C x h x w tensor file)")
    p.add_argument("feature_h", type=Path, help="high-level features (C x h x w tensor file)")
    p.add_argument("mask", type=Path, help="query label mask (h x w u8 tensor file)")

    p = sub.add_parser("ablate", parents=[run], help="delta / loss-weight / K-shot fusion sweeps")
    p.add_argument("--study", required=True, help=f"one of {', '.join(STUDIES)}")
    p.add_argument("--all-folds", action="store_true", help="average every cell over the four folds")
    p.add_argument("--seeds", type=int, default=1,
                   help="repeat every cell for seeds seed..seed+N-1 and report the median (default: 1)")

    p = sub.add_parser("report", help="merge metrics from run directories")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=Path("runs/report"))
    return ap


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {name: getattr(args, name) for name, _ in RUN_FLAGS.values()}
    overrides["ce_enabled"] = args.ce_enabled
    overrides["per_episode_miou"] = args.per_episode_miou
    return build_config(args.config, overrides)


def dispatch(args: argparse.Namespace) -> None:
    if args.command == "report":
        cmd_report(args.runs, args.out)
        return
    cfg = config_from_args(args)
    logger.info("%s with %s", args.command, cfg.model_dump())
    if args.command == "train":
        cmd_train(cfg)
    elif args.command == "eval":
        cmd_eval(cfg, args.checkpoint)
    elif args.command == "mine":
        cmd_mine(args.feature_m, args.feature_h, args.mask, cfg)
    elif args.command == "ablate":
        cmd_ablate(cfg, args.study, args.all_folds, args.seeds)


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except ConfigError as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    except (TensorFormatError, CheckpointError, DimensionError) as e:
        logger.error("format error: %s", e)
        return EXIT_FORMAT
    except EmptyCandidateError as e:
        logger.error("%s", e)
        return EXIT_NO_LATENT
    except Exception:
        logger.exception("%s failed", args.command)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
