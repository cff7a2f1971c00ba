"""ovsemi command line: generate, pseudolabel, train, eval, sweep.

Every command reads the same config (``--config`` takes a file or a preset
name), writes a ``config.txt`` snapshot next to its outputs and refuses to
overwrite a non-empty output directory unless ``--force`` is given.

Output layout under the output root (``--out``, ``$OVSEMI_OUT`` or
``./ovsemi_out``)::

    dataset/
    pseudolabels/<prompt_subset>-<digest>/
    train/<run name>-seed<seed>/
    eval/<run name>-seed<seed>-<split>-<target>/
    sweep/<axis>/
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__, workflow
from .config import PRESETS, resolve_config
from .errors import ConfigError, InfeasibleSplitError

log = logging.getLogger("ovsemi")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _parse_set(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(args):
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    if args.out is not None:
        overrides["run.out"] = args.out
    return resolve_config(args.config, overrides)


def _train_dir(cfg):
    return cfg.out_root / "train" / f"{cfg.run_name}-seed{cfg.train.seed}"


def cmd_generate(cfg, args):
    summary = workflow.generate_dataset(cfg, cfg.out_root / "dataset", force=args.force)
    print(json.dumps(summary, sort_keys=True))


def cmd_pseudolabel(cfg, args):
    out = workflow.pseudo_label_dir(cfg)
    summary = workflow.run_pseudolabel(cfg, cfg.out_root / "dataset", out, force=args.force)
    print(f"wrote {summary['count']} pseudo-labels to {out} "
          f"(skipped {summary['n_skipped']}, mean confidence {summary['mean_confidence']:.4f})")


def cmd_train(cfg, args):
    out = _train_dir(cfg)
    summary = workflow.run_train(cfg, cfg.out_root / "dataset", out, force=args.force)
    print(f"{out}: val mIoU {summary['val_mIoU']:.4f}")


def cmd_eval(cfg, args):
    name = f"{cfg.run_name}-seed{cfg.train.seed}-{cfg.eval.split}-{cfg.eval.target}"
    out = cfg.out_root / "eval" / name
    res = workflow.run_eval(cfg, cfg.out_root / "dataset", _train_dir(cfg), out, force=args.force)
    print(f"{out}: mIoU {res['mIoU']:.4f}")


def cmd_sweep(cfg, args):
    out = cfg.out_root / "sweep" / cfg.sweep.axis
    result = workflow.run_sweep(cfg, cfg.out_root / "dataset", out, force=args.force)
    for e in result.entries:
        print(f"{result.axis}={e.setting}: median {e.median:.4f} mean {e.mean:.4f}")
    print(f"report written to {out}")


COMMANDS = {
    "generate": (cmd_generate, "write synthetic scenes, the OOD manifest and split files"),
    "pseudolabel": (cmd_pseudolabel, "pre-generate teacher pseudo-labels for the OOD corpus"),
    "train": (cmd_train, "train one student and write checkpoint + metrics"),
    "eval": (cmd_eval, "evaluate a checkpoint (or the teacher) on a split"),
    "sweep": (cmd_sweep, "run an ablation sweep and render the report"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ovsemi", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help=f"config file or preset name ({', '.join(PRESETS)}); default semiovs")
    common.add_argument("--seed", type=int, default=None, help="training seed (train.seed)")
    common.add_argument("--out", default=None, help="output root (default $OVSEMI_OUT or ./ovsemi_out)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"ovsemi: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command][0](cfg, args)
    except (ConfigError, InfeasibleSplitError) as exc:
        print(f"ovsemi: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        if args.verbose:
            log.exception("command failed")
        print(f"ovsemi {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
