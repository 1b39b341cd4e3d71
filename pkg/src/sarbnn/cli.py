"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 I/O, 4 validation (malformed config,
manifest, image or checkpoint), 5 numeric failure (diverged training).
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .bnn import ArchitectureError, TrainingDiverged
from .calibration import CalibrationError
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .data import DataFormatError
from .tensor import NonFiniteError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4, 5


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file (default: $SARBNN_CONFIG)")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--samples", type=int, help="Monte-Carlo weight draws T")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", help="model checkpoint (default: config 'checkpoint')")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sarbnn", description="Bayesian CNN adversarial detection for SAR chips")
    parser.add_argument("--version", action="version", version=f"sarbnn {pipeline.TOOL_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic train/test chips")
    _common(p)

    p = sub.add_parser("train", help="variational training; writes model.ckpt and train_log.csv")
    _common(p)
    p.add_argument("--data", help="directory holding train.csv and test.csv")

    p = sub.add_parser("attack", help="surrogate scatterer attacks on held-out test chips")
    _common(p)
    _model_args(p)
    p.add_argument("--data", help="directory holding test.csv")
    p.add_argument("--attack-n", help="comma-separated scatterer counts")

    p = sub.add_parser("calibrate", help="threshold search on a 50 + 50 validation sample")
    _common(p)
    _model_args(p)
    p.add_argument("--benign", required=True, help="benign manifest")
    p.add_argument("--adversarial", required=True, help="adversarial manifest")
    p.add_argument("--alpha", type=float, help="false-positive budget")

    p = sub.add_parser("detect", help="per-image prediction, MI and verdict")
    _common(p)
    _model_args(p)
    p.add_argument("--images", required=True, help="manifest of images to screen")
    p.add_argument("--theta", type=float, help="fixed MI threshold")
    p.add_argument("--alpha", type=float, help="false-positive budget for calibration")
    p.add_argument("--validation", help="validation manifest (split column benign/adversarial)")

    p = sub.add_parser("explain", help="GBP-BNN saliency maps")
    _common(p)
    _model_args(p)
    p.add_argument("--image", required=True, help="PGM image or manifest CSV")
    p.add_argument("--k", help="comma-separated pixel counts")

    p = sub.add_parser("eval", help="ROC/AUC per attack-n and the SIR table")
    _common(p)
    _model_args(p)
    p.add_argument("--attacks", required=True, help="output directory of the attack command")
    p.add_argument("--attack-n", help="comma-separated scatterer counts")
    p.add_argument("--k", help="comma-separated pixel counts")
    return parser


def _run(args) -> None:
    cfg = load_config(args.config)
    cfg = cfg.replace(seed=args.seed, samples=args.samples, alpha=getattr(args, "alpha", None),
                      k=getattr(args, "k", None), attack_n=getattr(args, "attack_n", None),
                      checkpoint=getattr(args, "checkpoint", None), data_dir=getattr(args, "data", None))
    if getattr(args, "theta", None) is not None:
        cfg = cfg.replace(theta=repr(args.theta))
    if cfg.samples < 1:
        raise pipeline.UsageError("--samples must be at least 1")
    cmd = args.command
    if cmd == "gen-data":
        counts = pipeline.gen_data(cfg, args.out)
        print(f"wrote {counts['train']} train and {counts['test']} test chips to {args.out}")
    elif cmd == "train":
        _, history = pipeline.train(cfg, cfg.data_dir, args.out)
        print(f"trained {len(history)} epochs; final nll {history[-1]['nll']:.4f}")
    elif cmd == "attack":
        rates = pipeline.run_attacks(cfg, cfg.checkpoint, cfg.data_dir, args.out, cfg.attack_values())
        for n, r in rates.items():
            print(f"n={n}: success rate {r:.3f}")
    elif cmd == "calibrate":
        pol = pipeline.calibrate(cfg, cfg.checkpoint, args.benign, args.adversarial, args.out)
        print(f"theta={pol.threshold!r} tpr={pol.tpr} fpr={pol.fpr}{' (infeasible)' if pol.infeasible else ''}")
    elif cmd == "detect":
        pol = pipeline.detect(cfg, cfg.checkpoint, args.images, args.out, cfg.theta_value(), args.validation)
        print(f"theta={pol.threshold!r}")
    elif cmd == "explain":
        bundles = pipeline.explain(cfg, cfg.checkpoint, args.image, args.out)
        print(f"explained {len(bundles)} image(s)")
    elif cmd == "eval":
        res = pipeline.evaluate(cfg, cfg.checkpoint, args.attacks, args.out)
        for n in res.auc:
            print(f"n={n}: auc {res.auc[n]:.4f} sir {res.sir[n]}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except pipeline.UsageError as exc:
        parser.error(str(exc))
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"sarbnn: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"sarbnn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, DataFormatError, ConfigError, ArchitectureError, CalibrationError,
            pipeline.ManifestMismatch, ValueError) as exc:
        print(f"sarbnn: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"sarbnn: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
