"""Command-line entry point: ``snd {gen,train,render,eval,ablate,selftest}``.

Results go to stdout as JSON lines. Any failure exits nonzero after one
machine-parsable line on stderr: ``error <json object>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from ..rasterizer import set_threads
from . import fileio, pipeline
from .config import ABLATIONS, ConfigError, RunConfig, canonical_json, load_config
from .selftest import run_selftest

log = logging.getLogger("splat_distill")

EXIT_FAILURE, EXIT_CONFIG, EXIT_MISMATCH, EXIT_FORMAT = 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration JSON")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, help="output directory (default: config out_dir)")
    common.add_argument("--threads", type=int, help="rasterizer worker threads (fallback: $SND_THREADS)")
    common.add_argument("--ablation", choices=sorted(ABLATIONS), help="apply one ablation preset")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="snd", description="Splat-and-distill feature training at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("gen", parents=[common], help="write synthetic scenes")
    g.add_argument("--split", choices=("train", "eval", "all"), default="all")
    sub.add_parser("train", parents=[common], help="run distillation, write checkpoints and loss log")
    r = sub.add_parser("render", parents=[common], help="render teacher supervision and PCA images")
    r.add_argument("--checkpoint", type=Path)
    r.add_argument("--scene", type=Path, help="scene JSON (default: first eval scene)")
    r.add_argument("--view", type=int, default=1)
    e = sub.add_parser("eval", parents=[common], help="probe a checkpoint against its untrained init")
    e.add_argument("--checkpoint", type=Path)
    a = sub.add_parser("ablate", parents=[common], help="train and probe every ablation row")
    a.add_argument("--only", nargs="+", choices=pipeline.ABLATION_ORDER, help="subset of rows")
    sub.add_parser("selftest", parents=[common], help="oracle and gradient gates")
    return p


def resolve_threads(flag: int | None) -> int | None:
    value = flag if flag is not None else os.environ.get("SND_THREADS")
    if value in (None, ""):
        return None
    try:
        n = int(value)
    except ValueError as exc:
        raise ConfigError(f"thread count must be an integer, got {value!r}") from exc
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    set_threads(n)
    return n


def _config(args) -> RunConfig:
    base = load_config(args.config)
    return pipeline.with_overrides(base, seed=args.seed, out_dir=args.out, ablation=args.ablation)


def _emit(record) -> None:
    sys.stdout.write((record if isinstance(record, str) else canonical_json(record)) + "\n")
    sys.stdout.flush()


def cmd_gen(args, config: RunConfig) -> int:
    out = Path(config.out_dir) / "scenes"
    splits = ("train", "eval") if args.split == "all" else (args.split,)
    for split in splits:
        for path in pipeline.generate_scenes(config, out, split):
            _emit({"split": split, "path": str(path), "sha256": fileio.file_sha256(path)})
    return 0


def cmd_train(args, config: RunConfig) -> int:
    out = Path(config.out_dir)
    state, digest = pipeline.train(config, out)
    _emit({"checkpoint": str(out / pipeline.FINAL_CHECKPOINT), "sha256": digest, "steps": state.step,
           "config_hash": config.hash()})
    return 0


def _checkpoint_for(args, config: RunConfig):
    out = Path(config.out_dir)
    path = args.checkpoint or out / pipeline.FINAL_CHECKPOINT
    run_dir = path.parent if (path.parent / pipeline.MANIFEST).exists() else out
    explicit = config if args.config is not None else None
    ck_config, state = pipeline.load_checked_checkpoint(path, run_dir, explicit)
    return ck_config, state, run_dir


def cmd_eval(args, config: RunConfig) -> int:
    ck_config, state, run_dir = _checkpoint_for(args, config)
    ev = pipeline.evaluate_run(ck_config, state, run_dir)
    for r in ev["reports"]:
        _emit(r.to_json())
    return 0


def cmd_render(args, config: RunConfig) -> int:
    ck_config, state, run_dir = _checkpoint_for(args, config)
    if args.scene is not None:
        scene = fileio.load_scene(args.scene)
    else:
        scene = pipeline.load_scenes(ck_config, run_dir / "scenes", "eval")[0]
    if not 0 <= args.view < len(scene.views):
        raise ConfigError(f"view {args.view} out of range for {len(scene.views)} views")
    out = run_dir / "render" / f"scene{scene.spec.seed}_view{args.view}"
    _emit({"out": str(out), **pipeline.render_supervision(ck_config, state, scene, args.view, out)})
    return 0


def cmd_ablate(args, config: RunConfig) -> int:
    names = tuple(args.only) if args.only else pipeline.ABLATION_ORDER
    for row in pipeline.ablate(config, Path(config.out_dir), names):
        _emit(row)
    return 0


def cmd_selftest(args, config: RunConfig) -> int:
    results = run_selftest()
    for r in results:
        _emit(r)
    return 0 if all(r["ok"] for r in results) else EXIT_FAILURE


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "render": cmd_render, "eval": cmd_eval,
            "ablate": cmd_ablate, "selftest": cmd_selftest}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write("error " + json.dumps({"type": kind, "message": message}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", str(exc), EXIT_CONFIG)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        resolve_threads(args.threads)
        config = _config(args)
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        return _fail("ConfigError", str(exc), EXIT_CONFIG)
    except pipeline.ManifestMismatch as exc:
        return _fail("ManifestMismatch", str(exc), EXIT_MISMATCH)
    except fileio.FormatError as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_FORMAT)
    except FileNotFoundError as exc:
        return _fail("FileNotFoundError", str(exc), EXIT_FAILURE)
    except Exception as exc:  # noqa: BLE001 - the CLI contract is one error line, never a traceback
        log.debug("unhandled", exc_info=True)
        return _fail(type(exc).__name__, str(exc), EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
