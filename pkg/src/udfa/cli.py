"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

import argparse
import sys
from pathlib import Path

from .backbone import CheckpointError
from .config import ConfigError, load_config, parse_override
from .data import DataError, load_volume_h5, prepare_data, train_slice_files, volume_files
from .model import build_model
from .runner import TrainingError, ablate, evaluate, train


def _parse_shape(text: str) -> tuple:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError as e:
        raise ConfigError(f"bad shape {text!r}: {e}") from e
    if len(parts) != 3:
        raise ConfigError(f"shape must be S,H,W, got {text!r}")
    return parts


def _parse_grid(tokens: list) -> dict:
    grid = {"n_lgfa": [2, 3, 6], "input": [224]}
    if not tokens:
        return grid
    for token in tokens:
        key, _, raw = token.partition("=")
        if key not in grid or not raw:
            raise ConfigError(f"grid entries look like n_lgfa=2,3,6 or input=224, got {token!r}")
        try:
            grid[key] = [int(v) for v in raw.split(",")]
        except ValueError as e:
            raise ConfigError(f"bad grid values in {token!r}: {e}") from e
    return grid


def _load_configs(args):
    overrides = {}
    for item in args.set or []:
        key, value = parse_override(item)
        overrides[key] = value
    return load_config(args.config, overrides)


def cmd_prepare_data(args) -> int:
    manifest = prepare_data(
        args.dataset, args.root, num_cases=args.num_cases,
        shape=_parse_shape(args.shape), num_classes=args.num_classes, seed=args.seed,
    )
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"prepared {args.dataset} at {args.root}: cases {counts}, {len(manifest['files'])} files")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = _load_configs(args)
    if not train_cfg.data_root:
        raise ConfigError("data_root must be set for training")
    entries = train_slice_files(train_cfg.dataset, train_cfg.data_root)
    if not entries:
        raise DataError(f"no training slices under {train_cfg.data_root}")
    val_paths = volume_files(train_cfg.dataset, train_cfg.data_root, split="val")
    val_volumes = [load_volume_h5(p) for p in val_paths] or None
    model = build_model(model_cfg, seed=train_cfg.seed)
    summary = train(model, model_cfg, train_cfg, entries, train_cfg.output_dir, val_volumes=val_volumes)
    print(f"trained {summary['iterations']} iterations; final loss {summary['final_loss']:.4f}")
    print(f"checkpoint: {summary['checkpoint']}")
    if summary["best_checkpoint"]:
        print(f"best (val DSC {summary['best_val_dsc']:.4f}): {summary['best_checkpoint']}")
    return 0


def cmd_evaluate(args) -> int:
    model_cfg, train_cfg = _load_configs(args)
    if not train_cfg.data_root:
        raise ConfigError("data_root must be set for evaluation")
    model = build_model(model_cfg, seed=train_cfg.seed)
    model.load_trainable(args.checkpoint)
    volumes = [load_volume_h5(p) for p in volume_files(train_cfg.dataset, train_cfg.data_root, split="test")]
    if not volumes:
        raise DataError(f"no test volumes under {train_cfg.data_root}")
    report = evaluate(model, volumes, model_cfg, dataset_name=train_cfg.dataset, out_dir=args.out)
    from .figures import render_report_figures

    figures = render_report_figures(report, args.out, predictions_path=Path(args.out) / "predictions.h5")
    agg = report["aggregates"]
    hd = f"{agg['mean_hd95']:.4f}" if agg["mean_hd95"] is not None else "n/a"
    print(f"mean DSC {agg['mean_dsc']:.4f}  mean HD95 {hd}  ({len(report['cases'])} cases)")
    print(f"report files in {args.out}; {len(figures.panels)} overlay panels + summary chart")
    return 0


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = _load_configs(args)
    grid = _parse_grid(args.grid)
    train_entries = eval_volumes = None
    if args.with_training:
        if not train_cfg.data_root:
            raise ConfigError("data_root must be set for --with-training")
        train_entries = train_slice_files(train_cfg.dataset, train_cfg.data_root)
        eval_volumes = [load_volume_h5(p) for p in volume_files(train_cfg.dataset, train_cfg.data_root, split="test")]
    out_dir = args.out or str(Path(train_cfg.output_dir) / "ablation")
    result = ablate(model_cfg, train_cfg, grid["n_lgfa"], grid["input"], out_dir=out_dir,
                    train_entries=train_entries, eval_volumes=eval_volumes)
    for row in result["rows"]:
        dsc = f"{row['mean_dsc']:.4f}" if row["mean_dsc"] is not None else "n/a"
        print(f"input {row['input']}  n_lgfa {row['n_lgfa']}  blocks/stage {row['blocks_per_stage']}  "
              f"trainable {row['trainable_params']}  DSC {dsc}")
    print(f"ablation report in {out_dir}")
    return 0


def cmd_figures(args) -> int:
    from .figures import render_report_figures

    result = render_report_figures(args.report, args.out, predictions_path=args.predictions)
    if result.notice:
        print(result.notice)
    else:
        print(f"wrote {len(result.panels)} overlay panels and {1 if result.summary else 0} summary chart to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="udfa", description="U-DFA segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="generate synthetic data or index a dataset tree")
    p.add_argument("--dataset", required=True, choices=["synapse", "acdc", "synthetic"])
    p.add_argument("--root", required=True)
    p.add_argument("--num-cases", type=int, default=4)
    p.add_argument("--shape", default="8,64,64", help="synthetic volume shape S,H,W")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test volumes")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep stage count and input size")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", nargs="*", metavar="KEY=V1,V2", help="n_lgfa=2,3,6 input=224,308")
    p.add_argument("--out", default=None)
    p.add_argument("--with-training", action="store_true", help="train/evaluate each grid point")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("figures", help="render figures from a report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--predictions", default=None)
    p.set_defaults(func=cmd_figures)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
