"""Command-line entry point.

    scibilic synthesize [--config run.json] [--seed N] [--out DIR] [--section.key VALUE ...]
    scibilic train      ...
    scibilic predict    --input image.sciv [--checkpoint DIR]
    scibilic evaluate   [--checkpoint DIR]
    scibilic sweep      --thresholds 0.1,0.15,0.2 --iou-thresholds 0.1,0.5
    scibilic show-config

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .trainer import DivergenceError
from .unet import NonFiniteError
from .volume import SCIVError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

COMMANDS = ("synthesize", "train", "predict", "evaluate", "sweep", "show-config")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scibilic", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--checkpoint", help="checkpoint directory (default: <out>/checkpoint)")
    p.add_argument("--input", help="SCIV image for `predict`")
    p.add_argument("--thresholds", help="comma-separated binarization thresholds")
    p.add_argument("--iou-thresholds", help="comma-separated IoU detection thresholds")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _dotted_overrides(extra: list[str]) -> dict:
    """Parse ``--a.b value`` / ``--a.b=value`` pairs left over by argparse."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{key}")
            value = extra[i + 1]
            i += 2
        out[key] = value
    return out


def resolve_config(args, extra) -> RunConfig:
    cfg = load_config(args.config)
    overrides = _dotted_overrides(extra)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.thresholds:
        overrides["sweep.thresholds"] = [float(t) for t in args.thresholds.split(",")]
    if args.iou_thresholds:
        overrides["sweep.iou_thresholds"] = [float(t) for t in args.iou_thresholds.split(",")]
    if "output_dir" in overrides and not isinstance(overrides["output_dir"], str):
        overrides["output_dir"] = str(overrides["output_dir"])
    return apply_overrides(cfg, overrides)


def _run(args, cfg: RunConfig) -> int:
    if args.command == "show-config":
        sys.stdout.write(cfg.to_json())
        return EXIT_OK
    if args.command == "predict" and not args.input:
        raise ConfigError("predict needs --input <image.sciv>")
    if args.command in ("sweep",) and not (args.thresholds or args.iou_thresholds):
        raise ConfigError("sweep needs --thresholds and/or --iou-thresholds")
    with pipeline.output_lock(cfg.output_dir) as out:
        (out / "run_config.json").write_text(cfg.to_json())
        if args.command == "synthesize":
            path = pipeline.synthesize(cfg)
            print(f"wrote {path}")
        elif args.command == "train":
            result = pipeline.train_model(cfg)
            print(f"best epoch {result.best_epoch}; checkpoint in {out / 'checkpoint'}")
        elif args.command == "predict":
            ckpt = args.checkpoint or out / "checkpoint"
            pipeline.run_predict(cfg, ckpt, args.input)
            print(f"wrote maps to {out / 'predict'}")
        else:
            _, _, text = pipeline.evaluate(cfg, args.checkpoint)
            sys.stdout.write(text)
    return EXIT_OK


def main(argv=None) -> int:
    args, extra = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, extra)
        return _run(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (pipeline.DataError, SCIVError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
