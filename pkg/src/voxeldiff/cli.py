"""Command line interface: one subcommand per pipeline stage.

Flags mirror config keys and take precedence over the config file.
Exit codes: 0 success, 1 validation failure, 2 numerical failure,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ExperimentConfig, apply_overrides, load_config
from .errors import FormatError, NumericalError, ValidationError
from .harness import run_experiment

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


def _common(parser):
    parser.add_argument("-c", "--config", help="JSON config file")
    parser.add_argument("-o", "--out", dest="paths.out_dir", help="output directory")
    parser.add_argument("--seed", dest="seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxeldiff", description=__doc__)
    sub = parser.add_subparsers(dest="stage", required=True)

    p = sub.add_parser("make-scene", help="generate synthetic posed-image datasets")
    _common(p)
    p.add_argument("--scenes", dest="scene.count", type=int)
    p.add_argument("--blobs", dest="scene.blobs", type=int)
    p.add_argument("--frames", dest="scene.frame_count", type=int)
    p.add_argument("--image-size", dest="scene.image_size", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference verification of gradients")
    _common(p)

    p = sub.add_parser("train", help="joint 3-D + super-resolution diffusion training")
    _common(p)
    p.add_argument("--steps", dest="train.steps", type=int)
    p.add_argument("--lr", dest="train.lr", type=float)
    p.add_argument("--dataset", dest="paths.dataset")
    p.add_argument("--scenes", dest="scene.count", type=int)

    p = sub.add_parser("sample", help="ancestral sampling of a voxel field + renders")
    _common(p)
    p.add_argument("--checkpoint", dest="paths.checkpoint")
    p.add_argument("--dataset", dest="paths.dataset")

    p = sub.add_parser("distill", help="fuse a hypothesis bank into a high-res field")
    _common(p)
    p.add_argument("--steps", dest="distill.steps", type=int)
    p.add_argument("--lr", dest="distill.lr", type=float)
    p.add_argument("--loss", dest="distill.loss", choices=["patch-remix", "mse", "sds"])
    p.add_argument("--cameras", dest="distill.cameras", type=int)
    p.add_argument("--patch-size", dest="distill.patch_size", type=int)
    p.add_argument("--hypotheses", dest="distill.hypotheses", type=int)
    p.add_argument("--bank-source", dest="distill.bank_source", choices=["oracle", "checkpoint"])
    p.add_argument("--checkpoint", dest="paths.checkpoint")

    p = sub.add_parser("ablate", help="distill with patch-remix, mse, and sds losses")
    _common(p)
    p.add_argument("--steps", dest="distill.steps", type=int)
    p.add_argument("--lr", dest="distill.lr", type=float)
    p.add_argument("--cameras", dest="distill.cameras", type=int)

    p = sub.add_parser("heatmap", help="per-pixel variance heatmaps of a hypothesis bank")
    _common(p)
    p.add_argument("--hypotheses", dest="distill.heatmap_hypotheses", type=int)
    p.add_argument("--checkpoint", dest="paths.checkpoint")

    p = sub.add_parser("report", help="validate and pretty-print an existing report")
    _common(p)
    p.add_argument("report_path", nargs="?", help="path to report.json")

    return parser


def _config_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
        cfg.resolve_paths()
    overrides = {"stage": args.stage}
    for key, value in vars(args).items():
        if key in ("config", "stage", "report_path") or value is None:
            continue
        overrides[key] = value
    cfg = apply_overrides(cfg, overrides)
    if getattr(args, "report_path", None):
        cfg.paths.report = args.report_path
    cfg.resolve_paths()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config_from_args(args)
        report = run_experiment(cfg)
    except ValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
