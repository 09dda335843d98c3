"""Command line: gapnet {train, infer, eval, decompose, profile}."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataio import IMAGE_SUFFIXES, DataError, RunConfig, load_mask, parse_config, save_palette
from .labels import PALETTE, decompose
from .model import (
    PAPER_CSA_PARAMS,
    PAPER_GPC_PARAMS,
    PAPER_MACS,
    PAPER_PARAMS,
    ModelConfig,
    build_model,
    count_macs,
    count_params,
)
from .tensorcore import TensorError

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_run(args) -> tuple[ModelConfig, RunConfig]:
    model_cfg, run = parse_config(getattr(args, "config", None))
    preset = getattr(args, "preset", None)
    if preset and preset != run.preset:
        run = replace(run, preset=preset)
        model_cfg = run.model_config()
    return model_cfg, run


def cmd_train(args) -> int:
    from .pipeline import train

    model_cfg, run = _load_run(args)
    if args.epochs is not None:
        run = replace(run, epochs=args.epochs)
    log = print if args.verbose else None
    _, manifest = train(
        args.data, run, args.out, model_cfg, flip=not args.no_flip, max_steps=args.max_steps, init_checkpoint=args.init, log=log
    )
    print(f"steps={manifest.steps} final_loss={manifest.losses[-1]:.6f} checkpoint={Path(args.out) / 'latest.gapn'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .pipeline import RunManifest, infer

    if args.config is None and args.preset is None:
        manifest = Path(args.checkpoint).with_name("manifest.json")
        if manifest.exists():
            run = RunConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in RunManifest.read(manifest).config.items()})
            model_cfg = run.model_config()
        else:
            model_cfg, run = _load_run(args)
    else:
        model_cfg, run = _load_run(args)
    size = args.size or run.infer_size
    written = infer(args.checkpoint, args.input, args.out, size, model_cfg, args.emit_sides, args.emit_regions)
    print(f"wrote {len(written)} maps to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate_dataset

    report = evaluate_dataset(args.pred, args.gt, args.wf_beta2)
    sys.stdout.write(report.to_table())
    if args.report:
        Path(args.report).write_text(report.to_keyvalue())
    for s in report.skipped:
        print(f"skipped: {s}", file=sys.stderr)
    if report.excluded:
        print(f"empty ground truth (MAE only): {', '.join(report.excluded)}", file=sys.stderr)
    return EXIT_INPUT if report.skipped or report.count == 0 else EXIT_OK


def cmd_decompose(args) -> int:
    src, dst = Path(args.input), Path(args.out)
    files = [f for f in sorted(src.iterdir()) if f.suffix.lower() in IMAGE_SUFFIXES]
    if not files:
        raise DataError(f"no masks in {src}")
    for f in files:
        label = decompose(load_mask(f))
        save_palette(dst / f"{f.stem}.png", label.region, PALETTE)
    print(f"wrote {len(files)} region maps to {dst}")
    return EXIT_OK


def _band(value: float, ref: float, rel: float) -> str:
    return "ok" if abs(value - ref) <= rel * ref else "OUT OF BAND"


def cmd_profile(args) -> int:
    cfg = ModelConfig.preset(args.preset, mode=args.mode)
    model = build_model(cfg)
    params = count_params(model)
    macs = count_macs(model, args.size)
    print(f"preset={args.preset} mode={args.mode} input={args.size}x{args.size}")
    print("parameters")
    for k, v in params.items():
        if k != "sites" and (v or k == "total"):
            print(f"  {k:<14}{v:>12,d}")
    for site, v in params["sites"].items():
        ref = PAPER_CSA_PARAMS if site.startswith("csa") else PAPER_GPC_PARAMS
        print(f"  site {site:<9}{v:>12,d}  (reference {ref / 1e6:.3f}M, +-30%: {_band(v, ref, 0.30)})")
    print("multiply-accumulates")
    for k, v in macs.by_group.items():
        if v:
            print(f"  {k:<14}{v / 1e9:>12.4f} G")
    print(f"  {'total':<14}{macs.total / 1e9:>12.4f} G  ({macs.flops / 1e9:.4f} G at 2 FLOPs per MAC)")
    if args.preset == "paper" and args.size == 384 and args.mode == "image":
        print("reference row")
        print(f"  params {params['total'] / 1e6:.3f}M vs {PAPER_PARAMS / 1e6:.2f}M: "
              f"{'ok' if 1.79e6 <= params['total'] <= 2.19e6 else 'OUT OF BAND'}")
        print(f"  MACs   {macs.total / 1e9:.3f}G vs {PAPER_MACS / 1e9:.2f}G (+-25%): {_band(macs.total, PAPER_MACS, 0.25)}")
    print(f"profile forward took {macs.seconds:.2f} s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gapnet", description="Granularity-aware salient object detection.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, help="dataset root (images/ + masks/, or clips/)")
    t.add_argument("--out", required=True, help="output directory for checkpoint and manifest")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--preset", choices=("paper", "toy"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--init", help="checkpoint to start from (video fine-tuning)")
    t.add_argument("--no-flip", action="store_true", help="disable horizontal flips")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write saliency maps")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--size", type=int)
    i.add_argument("--config")
    i.add_argument("--preset", choices=("paper", "toy"))
    i.add_argument("--emit-sides", action="store_true", help="also write p1 and p2")
    i.add_argument("--emit-regions", action="store_true", help="also write regions of the binarised p3")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against masks")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", help="write key=value results here")
    e.add_argument("--wf-beta2", type=float, default=1.0)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("decompose", help="write boundary/center/others maps for masks")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decompose)

    pr = sub.add_parser("profile", help="parameter and MAC breakdown")
    pr.add_argument("--preset", choices=("paper", "toy"), default="paper")
    pr.add_argument("--size", type=int, default=384)
    pr.add_argument("--mode", choices=("image", "video"), default="image")
    pr.set_defaults(func=cmd_profile)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    try:
        return args.func(args)
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (DataError, TensorError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
