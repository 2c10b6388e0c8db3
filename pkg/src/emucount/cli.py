"""Command-line entry point.

Exit codes: 0 success, 2 usage/config error, 3 runtime/numeric error.
Every command is deterministic given its seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data, report, trainer
from .data import SceneSpec, _write_pnm, load_sample, load_split
from .errors import ConfigError, ContractError, NumericError, ParseError, ShapeError
from .trainer import TrainConfig


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--size must look like 64x64, got {text!r}") from None
    if h % 8 or w % 8:
        raise ConfigError(f"size {h}x{w} must be divisible by 8")
    return h, w


def _parse_range(text: str) -> tuple[float, float]:
    try:
        a, b = (float(p) for p in text.split(","))
    except ValueError:
        raise ConfigError(f"expected a,b range, got {text!r}") from None
    if not 0.0 <= a <= b <= 1.0:
        raise ConfigError(f"range must satisfy 0 <= a <= b <= 1, got {text!r}")
    return a, b


def cmd_gen_data(args) -> int:
    h, w = _parse_size(args.size)
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise ConfigError(f"output directory {args.out!r} is not empty (use --force)")
    spec = SceneSpec(height=h, width=w)
    illum = _parse_range(args.illumination_range)
    for split, count in (("train", args.train), ("val", args.val), ("test", args.test)):
        if count < 0:
            raise ConfigError(f"--{split} must be >= 0, got {count}")
        if count:
            data.generate_split(args.out, split, count, spec, args.seed,
                                illumination_range=illum)
        print(f"{split}: {count} samples")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_json(args.config)
    train_samples = load_split(args.data, "train")
    val_samples = load_split(args.data, "val")

    def progress(row):
        print(f"epoch {row.epoch}: l_bl={row.l_bl:.4f} l_cl={row.l_cl:.4f} "
              f"val_game0={row.val_game0:.4f} val_rmse={row.val_rmse:.4f}")

    history = trainer.train(train_samples, val_samples, cfg, args.out,
                            resume=args.resume, progress=progress)
    if history:
        report.save_training_curves(os.path.join(args.out, "curves.png"), history)
    print(f"wrote {os.path.join(args.out, 'log.csv')}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = trainer.load_model(args.ckpt)
    samples = load_split(args.data, args.split)
    result = trainer.evaluate(samples, model, cfg)
    os.makedirs(args.out, exist_ok=True)
    table = report.eval_table(result)
    print(table)
    with open(os.path.join(args.out, "metrics.txt"), "w") as f:
        f.write(table + "\n")
    report.write_csv(os.path.join(args.out, "metrics.csv"),
                     ["metric", "level", "value"], report.metrics_rows(result))
    return 0


def cmd_ablate(args) -> int:
    base_cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    try:
        with open(args.grid) as f:
            grid = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.grid}: not valid JSON: {exc}") from None
    rows = trainer.run_ablation(args.data, grid, base_cfg, args.out)
    os.makedirs(args.out, exist_ok=True)
    table = report.format_table(report.ABLATION_HEADERS, report.ablation_rows(rows))
    print(table)
    with open(os.path.join(args.out, "ablation.txt"), "w") as f:
        f.write(table + "\n")
    report.write_csv(os.path.join(args.out, "ablation.csv"),
                     report.ABLATION_HEADERS, report.ablation_rows(rows))
    report.save_ablation_chart(os.path.join(args.out, "ablation.png"), rows)
    return 0


def cmd_probe(args) -> int:
    model, cfg = trainer.load_model(args.ckpt)
    if model.prompts is None:
        raise ConfigError("this checkpoint was trained without prompting; nothing to probe")
    samples = load_split(args.data, args.split)
    probe = trainer.alignment_probe(samples, model, bin_width=args.bin_width)
    os.makedirs(args.out, exist_ok=True)
    text = ("RGB vs pseudo-RGB (median %.4f)\n%s\n\n"
            "thermal vs pseudo-thermal (median %.4f)\n%s\n"
            % (probe.median_rgb, report.histogram_text(probe.hist_rgb),
               probe.median_thermal, report.histogram_text(probe.hist_thermal)))
    print(text)
    with open(os.path.join(args.out, "alignment.txt"), "w") as f:
        f.write(text)
    rows = []
    for pair, hist in (("rgb", probe.hist_rgb), ("thermal", probe.hist_thermal)):
        for i, pct in enumerate(hist.percentages):
            rows.append([pair, i * hist.bin_width, (i + 1) * hist.bin_width, pct])
    report.write_csv(os.path.join(args.out, "alignment.csv"),
                     ["pair", "bin_lo", "bin_hi", "percent"], rows)
    report.save_alignment_figure(os.path.join(args.out, "alignment.png"), probe)
    return 0


def cmd_export_density(args) -> int:
    model, cfg = trainer.load_model(args.ckpt)
    sample = load_sample(args.sample)
    from .autodiff import Tensor
    density = model.predict(Tensor(sample.rgb), Tensor(sample.aux)).data
    count = float(density.sum())
    peak = density.max()
    scaled = density / peak if peak > 0 else np.zeros_like(density)
    _write_pnm(args.out, scaled, b"P5")
    with open(args.out + ".json", "w") as f:
        json.dump({"count": count, "map_height": density.shape[0],
                   "map_width": density.shape[1]}, f)
    base, _ = os.path.splitext(args.out)
    report.save_density_figure(base + ".png", density, count)
    print(f"count={count:.6f} map={density.shape[0]}x{density.shape[1]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emucount",
                                     description="bimodal crowd counting via modal emulation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic bimodal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, required=True)
    p.add_argument("--val", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--size", default="64x64")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--illumination-range", default="0.0,1.0")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe", help="real-vs-pseudo feature alignment histogram")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--bin-width", type=float, default=0.04)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("export-density", help="write a predicted density map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_density)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, ShapeError, NumericError, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
