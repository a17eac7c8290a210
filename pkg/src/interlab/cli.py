"""``interlab`` command line.

Each verb runs one pipeline stage from a YAML config; ``run`` runs the
config's stage list.  ``--config`` accepts a path or the name of a bundled
config (see ``interlab configs``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

from .checkpoint import CheckpointError
from .config import STAGES, ConfigError, apply_thread_env, load_config
from .pipeline import Pipeline, RunLockedError, StageInputError

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def bundled_configs() -> dict[str, Path]:
    root = resources.files("interlab") / "configs"
    return {Path(p.name).stem: Path(str(p)) for p in root.iterdir() if p.name.endswith(".yaml")}


def resolve_config(ref: str) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    canned = bundled_configs()
    if ref in canned:
        return canned[ref]
    raise ConfigError([f"config {ref!r} is neither a file nor a bundled config ({', '.join(sorted(canned))})"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="interlab", description="Synthetic multilingual interference lab.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in (*STAGES, "run"):
        p = sub.add_parser(verb, help="run all configured stages" if verb == "run" else f"run the {verb} stage")
        p.add_argument("--config", required=True, help="YAML path or bundled config name")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--out", default=None, help="output directory (beats INTERLAB_OUT and the config)")
        p.add_argument("--resume", action="store_true", help="skip finished stages, continue from checkpoints")
        if verb == "run":
            p.add_argument("--stages", default=None, help="comma-separated stage subset")
    sub.add_parser("configs", help="list bundled configs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "configs":
        for name, path in sorted(bundled_configs().items()):
            print(f"{name}\t{path}")
        return EXIT_OK
    if args.verb == "run":
        stages = args.stages.split(",") if args.stages else None
    else:
        stages = [args.verb]
    try:
        cfg = load_config(resolve_config(args.config), seed=args.seed, out_dir=args.out, stages=stages)
    except ConfigError as exc:
        print(f"interlab: invalid config\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    limiter = apply_thread_env()
    try:
        Pipeline(cfg, resume=args.resume).run(cfg.stages)
    except (RunLockedError, StageInputError, CheckpointError) as exc:
        print(f"interlab: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    print(f"interlab: finished {', '.join(cfg.stages)} -> {cfg.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
