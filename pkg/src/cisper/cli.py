"""Command-line entry point: ``cisper {features,train,eval,ablate,sweep,stats}``.

Exit codes: 0 success, 1 user/config error, 2 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import tempfile
import traceback
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import yaml

from . import __version__
from .errors import CisperError, ConfigurationError
from .train import RunConfig, coerce_value

logger = logging.getLogger("cisper")

SUBCOMMANDS = ("features", "train", "eval", "ablate", "sweep", "stats")


def _keys_epilog() -> str:
    lines = ["config keys (defaults):"]
    for key, default in RunConfig.keys().items():
        lines.append(f"  {key} = {default!r}")
    lines.append("")
    lines.append("CISPER_CACHE_DIR overrides cache_dir.")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML key/value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    common.add_argument("--mode", help="shortcut for --set mode=M")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="cisper",
        description="Context- and commonsense-prompted masked-LM emotion recognition in conversation.",
        epilog=_keys_epilog(),
        formatter_class=fmt,
    )
    parser.add_argument("--version", action="version", version=f"cisper {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.add_parser("features", parents=[common], help="extract and cache utterance features", epilog=_keys_epilog(), formatter_class=fmt)
    sub.add_parser("train", parents=[common], help="train and report on the test split", epilog=_keys_epilog(), formatter_class=fmt)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint", epilog=_keys_epilog(), formatter_class=fmt)
    p.add_argument("--checkpoint", help="checkpoint file (default: <out>/best.ckpt)")
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    sub.add_parser("ablate", parents=[common], help="prompt-information ablation table", epilog=_keys_epilog(), formatter_class=fmt)
    p = sub.add_parser("sweep", parents=[common], help="prompt-length sweep", epilog=_keys_epilog(), formatter_class=fmt)
    p.add_argument("--values", default="1,2,3,4,5", help="comma-separated N_e (= N_p) values")
    p = sub.add_parser("stats", parents=[common], help="conversation/utterance counts per split", epilog=_keys_epilog(), formatter_class=fmt)
    p.add_argument("--data-dir", help="directory holding the standard MELD/EmoryNLP release files")
    return parser


def load_config(args) -> RunConfig:
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {path} must be a flat key/value mapping")
        nested = [k for k, v in loaded.items() if isinstance(v, (dict, list))]
        if nested:
            raise ConfigurationError(f"config must be flat; nested values for {nested}")
        data.update(loaded)
    known = RunConfig.keys()
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigurationError(f"unknown config key {key!r}")
        data[key] = coerce_value(key, value, known[key])
    if args.seed is not None:
        data["seed"] = args.seed
    if args.mode is not None:
        data["mode"] = args.mode
    if args.out is not None:
        data["out_dir"] = args.out
    return RunConfig.from_mapping(data).validate()


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()


def write_metadata(cfg: RunConfig, command: str, out: Path) -> None:
    import numpy
    import torch

    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": command,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "config": asdict(cfg),
        "versions": {
            "cisper": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": numpy.__version__,
        },
    }
    (out / f"run_meta_{command}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _cmd_stats(cfg: RunConfig, args, out: Path) -> None:
    from .corpus import format_split_counts, split_counts
    from .pipeline import load_splits

    report = split_counts(load_splits(cfg, args.data_dir, align=False))
    print(format_split_counts(report, cfg.dataset))
    (out / "stats.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")


def _cmd_features(cfg: RunConfig, args, out: Path) -> None:
    from .pipeline import cache_root, prepare

    exp = prepare(cfg)
    for tag, feats in exp.features.items():
        print(f"{tag}: {len(feats)} conversations cached under {cache_root(cfg)}")


def _cmd_train(cfg: RunConfig, args, out: Path) -> None:
    from .pipeline import prepare, run_training

    exp = prepare(cfg)
    _, result, report = run_training(cfg, exp, out)
    print(report.per_class_table())
    print(f"weighted-F1 = {report.weighted_f1:.4f}  (best checkpoint: {out / 'best.ckpt'})")


def _cmd_eval(cfg: RunConfig, args, out: Path) -> None:
    from .evaluation import evaluate
    from .pipeline import prepare, restore_model
    from .train import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint or out / "best.ckpt")
    model = restore_model(ckpt)
    model_cfg = RunConfig.from_mapping(ckpt.config)
    data_keys = ("dataset", "adapter", "train_path", "validation_path", "test_path", "cache_dir")
    data_cfg = model_cfg.replace(**{k: getattr(cfg, k) for k in data_keys})
    exp = prepare(data_cfg)
    if args.split not in exp.splits:
        raise ConfigurationError(f"split {args.split!r} not configured")
    report = evaluate(model, exp.splits[args.split], exp.features[args.split], {"split": args.split}, model_cfg.classify_mode)
    report.save(out / f"eval_{args.split}.json")
    print(report.per_class_table())


def _cmd_ablate(cfg: RunConfig, args, out: Path) -> None:
    from .pipeline import prepare
    from .suites import ablation_suite, pipeline_runner

    rows = ablation_suite(cfg, pipeline_runner(prepare(cfg), out / "runs"), out)
    print("commonsense\tcontext\tmode\tweighted_f1\tdelta")
    for r in rows:
        print(f"{r['commonsense']}\t{r['context']}\t{r['mode']}\t{r['weighted_f1']:.4f}\t{r['delta_vs_random']:+.4f}")


def _cmd_sweep(cfg: RunConfig, args, out: Path) -> None:
    from .pipeline import prepare
    from .suites import pipeline_runner, sweep_prompt_length

    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"--values must be comma-separated integers, got {args.values!r}") from None
    rows = sweep_prompt_length(cfg, values, pipeline_runner(prepare(cfg), out / "runs"), out)
    print("N\tpseudo_tokens\tweighted_f1")
    for r in rows:
        print(f"{r['n']}\t{r['pseudo_tokens']}\t{r['weighted_f1']:.4f}")


COMMANDS = {
    "stats": _cmd_stats,
    "features": _cmd_features,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "sweep": _cmd_sweep,
}


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out or ".")
    try:
        cfg = load_config(args)
        out = Path(cfg.out_dir)
        write_metadata(cfg, args.command, out)
        COMMANDS[args.command](cfg, args, out)
        return 0
    except CisperError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        try:
            out.mkdir(parents=True, exist_ok=True)
            log_path = out / "error.log"
        except OSError:
            log_path = Path(tempfile.mkstemp(prefix="cisper-error-", suffix=".log")[1])
        log_path.write_text(traceback.format_exc(), encoding="utf-8")
        print(f"internal error: {exc!r} (traceback in {log_path})", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
