"""Command line entry point: ``fedscal run|ablate|compare|pretrain``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import harness as hz
from .metrics import evaluate_accuracy
from .model import save_params


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _seed_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in _csv_list(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text!r}") from exc


# flag -> (section, field); section None means a top-level field
_FLAG_FIELDS = {
    "rounds": ("federation", "rounds"),
    "local_epochs": ("federation", "local_epochs"),
    "batch_size": ("federation", "batch_size"),
    "lr": ("federation", "lr"),
    "participation": ("federation", "participation"),
    "labeler": ("federation", "labeler"),
    "workers": ("federation", "workers"),
    "lambda_local": ("scal", "lambda_local"),
    "lambda_global": ("scal", "lambda_global"),
    "beta": ("scal", "beta"),
    "checkpoint_every": (None, "checkpoint_every"),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="demo", help="built-in config name (demo, smoke) or YAML path")
    p.add_argument("--seeds", type=_seed_list, help="comma-separated seeds, e.g. 1,2,3")
    p.add_argument("--output", help=f"output root (default: ${hz.OUTPUT_ENV} or the config's output_dir)")
    p.add_argument("--name", help="experiment name (subdirectory of the output root)")
    p.add_argument("--rounds", type=int)
    p.add_argument("--local-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--participation", type=float)
    p.add_argument("--labeler", choices=("shot", "bmd"))
    p.add_argument("--workers", type=int, help="threads for client updates within a round")
    p.add_argument("--lambda-local", type=float)
    p.add_argument("--lambda-global", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.FIELD=VALUE",
        help="override any config field, e.g. geometry.rotation=1.0 (repeatable)",
    )


def build_config(args: argparse.Namespace) -> hz.ExperimentConfig:
    """Load the config, then apply flag and --set overrides by re-parsing the merged mapping."""
    cfg = hz.load_config(args.config)
    data = cfg.to_dict()
    for flag, (section, key) in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if section is None:
            data[key] = value
        else:
            data[section][key] = value
    for item in args.set:
        path, sep, text = item.partition("=")
        if not sep:
            raise hz.ConfigError(f"--set {item!r}: expected SECTION.FIELD=VALUE")
        section, dot, key = path.partition(".")
        value = yaml.safe_load(text)
        if dot:
            data.setdefault(section, {})[key] = value
        else:
            data[section] = value
    if getattr(args, "seeds", None):
        data["seeds"] = list(args.seeds)
    if getattr(args, "name", None):
        data["name"] = args.name
    return hz.parse_config(yaml.safe_dump(data, sort_keys=False), source=f"{args.config} (with overrides)")


def cmd_run(args) -> int:
    cfg = build_config(args)
    if args.methods:
        cfg = replace(cfg, methods=tuple(_csv_list(args.methods)))
    root = hz.output_root(args.output, cfg)
    cells = hz.run_experiment(cfg, root, resume=args.resume, log=print)
    print(f"{len(cells)} runs written to {root / cfg.name}")
    print((root / cfg.name / "summary.md").read_text(), end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    arms = {"scal": hz.SCAL_ARMS, "threshold": hz.THRESHOLD_ARMS, "all": hz.ABLATION_ARMS}[args.kind]
    cfg = replace(cfg, methods=(), ablation=arms)
    root = hz.output_root(args.output, cfg)
    cells = hz.run_experiment(cfg, root, resume=args.resume, log=print)
    print(f"{len(cells)} runs written to {root / cfg.name}")
    print((root / cfg.name / "summary.md").read_text(), end="")
    return 0


def cmd_compare(args) -> int:
    rows_a = hz.read_metrics_csv(Path(args.run_a) / "metrics.csv")
    rows_b = hz.read_metrics_csv(Path(args.run_b) / "metrics.csv")
    text = hz.compare_runs(rows_a, rows_b, args.metric)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_pretrain(args) -> int:
    cfg = build_config(args)
    root = hz.output_root(args.output, cfg) / cfg.name
    root.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        setup = hz.prepare_seed(cfg, seed)
        init = evaluate_accuracy(setup.init, setup.clients)
        save_params(setup.init, root / f"source-s{seed}")
        print(
            f"seed {seed}: source train acc {setup.source_accuracy:.4f}, "
            f"target acc before adaptation {init.average:.4f} -> {root / f'source-s{seed}'}.bin"
        )
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedscal", description="Federated source-free adaptation simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run methods x seeds and write metrics plus a summary")
    _add_common(p)
    p.add_argument("--methods", help="comma-separated subset of loa,fedloa,fedscal")
    p.add_argument("--resume", action="store_true", help="continue from checkpoints where present")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="alignment-term and threshold ablations of fedscal")
    _add_common(p)
    p.add_argument("--kind", choices=("scal", "threshold", "all"), default="all")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", help="per-round difference of a global metric between two run directories")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--metric", default="pacc")
    p.add_argument("--out", help="write the CSV here instead of stdout")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("pretrain", help="pretrain and save the source model for each seed")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except hz.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
