"""Command line entry point: ``groupnav gen-env | train | eval | report``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from pydantic import ValidationError

from . import __version__
from .config import load_config
from .evaluate import PerturbSpec
from .experiment import ENV_FILE, REPORT_JSON, gen_env, run_eval, run_training, write_report
from .train import TrainingAborted

OUT_ENV_VAR = "GROUPNAV_OUT"

log = logging.getLogger("groupnav")


def _out_dir(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(OUT_ENV_VAR):
        return Path(os.environ[OUT_ENV_VAR])
    return Path(cfg.output_dir)


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _checkpoint_arg(text: str) -> tuple[str, str]:
    name, sep, path = text.partition("=")
    if not sep:
        path = name
        name = Path(path).stem.replace("checkpoint_", "")
    return name, path


def cmd_gen_env(args) -> int:
    cfg = _config(args)
    path = gen_env(cfg, _out_dir(args, cfg))
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    env = Path(args.env) if args.env else out / ENV_FILE
    if not env.exists():
        print(f"error: env bundle {env} not found (run gen-env first)", file=sys.stderr)
        return 2
    try:
        paths = run_training(cfg, env, out, workers=args.workers)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}; last parameters saved to {out / 'checkpoint_last.json'}",
              file=sys.stderr)
        return 3
    for p in paths.values():
        print(p)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    env = Path(args.env) if args.env else out / ENV_FILE
    checkpoints = {}
    for text in args.checkpoint:
        name, path = _checkpoint_arg(text)
        if not Path(path).exists():
            print(f"error: checkpoint {path} not found", file=sys.stderr)
            return 2
        checkpoints.setdefault(name, []).append(path)
    if not env.exists():
        print(f"error: env bundle {env} not found", file=sys.stderr)
        return 2
    specs = [PerturbSpec.parse(s) for s in args.grid.split(",")] if args.grid else None
    result = run_eval(cfg, env, checkpoints, out, specs=specs, split=args.split, workers=args.workers)
    print(result["csv"])
    print(result["json"])
    return 0


def cmd_report(args) -> int:
    inputs = args.inputs or [str(Path(args.out or ".") / REPORT_JSON)]
    missing = [p for p in inputs if not Path(p).exists()]
    if missing:
        print(f"error: missing report input(s): {', '.join(missing)}", file=sys.stderr)
        return 2
    out = Path(args.out or ".") / "report.md"
    write_report(inputs, out)
    print(out.read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groupnav", description=__doc__)
    parser.add_argument("--version", action="version", version=f"groupnav {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment YAML")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=1, help="max concurrent rollouts (results unaffected)")
        p.add_argument("--out", default=None, help=f"output directory (else ${OUT_ENV_VAR}, else config)")

    p = sub.add_parser("gen-env", help="generate graphs and episodes")
    common(p)
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("train", help="SFT warm-up followed by group-relative RL")
    common(p)
    p.add_argument("--env", default=None, help="env bundle (default: <out>/env.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="robustness table for one or more checkpoints")
    common(p)
    p.add_argument("--env", default=None, help="env bundle (default: <out>/env.json)")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="[name=]path; repeat a name once per eval seed to pair checkpoints with seeds")
    p.add_argument("--grid", default=None, help="comma list, e.g. none,global:0.2,early:2")
    p.add_argument("--split", default="val_unseen")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render robustness JSON files as a markdown table")
    p.add_argument("inputs", nargs="*", help="robustness.json files")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: invalid config:\n{exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
