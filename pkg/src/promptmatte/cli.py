"""Command-line entry point for the whole pipeline.

Subcommands: gen-data, train, eval, infer, viz-attn, impro, params.
Configuration is a single JSON document (see config.RunConfig); every
field is optional.  Exit codes: 0 success, 2 argument errors, 3
runtime/data errors.  PNG (8-bit, alpha as grayscale) is the only image
interchange format.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config, run_config_from_dict
from .errors import PromptMatteError
from .images import load_rgb, save_gray
from .metrics import MetricRow, impro
from .prompts import parse_prompt_file
from .serialization import load_checkpoint
from .synth import generate_dataset
from .training import (
    attention_map_for_scene,
    eval_report_table,
    eval_report_to_csv,
    evaluate,
    predict_alpha,
    train_loop,
)
from .unet import init_model, param_count

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptmatte",
        description="Visual-prompt interactive matting: data, training, evaluation, inference.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--duplicate-prob", type=float, default=0.5)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--data", default=None, help="optional dataset directory; "
                   "scenes stream from the seed when omitted")
    p.add_argument("--out", required=True, help="checkpoint directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--prompt", required=True, choices=["point", "box", "mask"])
    p.add_argument("--baseline", default=None,
                   help="five comma-separated baseline metric values for Impro")
    p.add_argument("--out", default=None, help="directory for report.csv/report.txt")
    p.add_argument("--eval-seed", type=int, default=0)

    p = sub.add_parser("infer", help="predict an alpha matte for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", required=True, help="prompt file")
    p.add_argument("--opacity", type=int, choices=[0, 1], default=None,
                   help="override the prompt file's opacity label")
    p.add_argument("--out", required=True, help="output alpha PNG")

    p = sub.add_parser("viz-attn", help="export the final cross-attention map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--opacity", type=int, choices=[0, 1], default=None)
    p.add_argument("--out", required=True, help="output grayscale PNG")

    p = sub.add_parser("impro", help="average relative improvement of one metric row")
    p.add_argument("--baseline", required=True, help="comma-separated values")
    p.add_argument("--method", required=True, help="comma-separated values")

    p = sub.add_parser("params", help="parameter count for a configuration")
    p.add_argument("--config", default=None)
    return parser


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_run_config(path)


def _load_model(ckpt_dir):
    params, manifest = load_checkpoint(ckpt_dir)
    run = run_config_from_dict(manifest.get("config", {}))
    return params, run, manifest


def _pad_to_multiple(image: np.ndarray, multiple: int) -> tuple[np.ndarray, int, int]:
    h, w = image.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return image, h, w


def _infer_alpha(params, run, args):
    image = load_rgb(args.image)
    prompt, opacity = parse_prompt_file(args.prompt)
    if args.opacity is not None:
        opacity = args.opacity
    multiple = run.codec.downsample_factor * (1 << (run.unet.levels - 1))
    padded, h, w = _pad_to_multiple(image, multiple)
    pred = predict_alpha(params, run, padded, prompt, opacity)
    return pred.data[0, 0, :h, :w], padded, prompt, opacity


def _cmd_gen_data(args) -> int:
    generate_dataset(args.out, count=args.count, seed=args.seed, size=args.size,
                     duplicate_prob=args.duplicate_prob)
    print(f"wrote {args.count} scenes to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    run = _load_config(args.config)
    params = init_model(run.unet, run.codec, seed=run.train.seed)

    def progress(step, total, loss):
        if step % 50 == 0 or step == total - 1:
            print(f"step {step + 1}/{total}  loss {loss:.4f}", file=sys.stderr)

    train_loop(params, run, data_dir=args.data, out_dir=args.out, progress=progress)
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    params, run, _ = _load_model(args.ckpt)
    baseline = None
    if args.baseline:
        values = [float(v) for v in args.baseline.split(",")]
        if len(values) != 5:
            raise ValueError("--baseline needs exactly 5 comma-separated values")
        baseline = MetricRow(*values)
    report = evaluate(params, run, args.data, args.prompt, baseline=baseline,
                      eval_seed=args.eval_seed,
                      warn=lambda msg: print(msg, file=sys.stderr))
    table = eval_report_table(report)
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(eval_report_to_csv(report))
        (out / "report.txt").write_text(table)
        print(f"report written to {out}")
    return EXIT_OK


def _cmd_infer(args) -> int:
    params, run, _ = _load_model(args.ckpt)
    alpha, _, _, _ = _infer_alpha(params, run, args)
    save_gray(args.out, alpha)
    print(f"alpha written to {args.out}")
    return EXIT_OK


def _cmd_viz_attn(args) -> int:
    params, run, _ = _load_model(args.ckpt)
    image = load_rgb(args.image)
    prompt, opacity = parse_prompt_file(args.prompt)
    if args.opacity is not None:
        opacity = args.opacity
    multiple = run.codec.downsample_factor * (1 << (run.unet.levels - 1))
    padded, h, w = _pad_to_multiple(image, multiple)
    grid, degenerate, _ = attention_map_for_scene(params, run, padded, prompt, opacity)
    if degenerate:
        print("warning: attention map is constant (degenerate); writing zeros",
              file=sys.stderr)
    scale_h = padded.shape[0] // grid.shape[0]
    scale_w = padded.shape[1] // grid.shape[1]
    upsampled = np.repeat(np.repeat(grid, scale_h, axis=0), scale_w, axis=1)[:h, :w]
    save_gray(args.out, upsampled)
    print(f"attention map written to {args.out}")
    return EXIT_OK


def _cmd_impro(args) -> int:
    baseline = [float(v) for v in args.baseline.split(",")]
    method = [float(v) for v in args.method.split(",")]
    print(f"{impro(baseline, method):.2f}")
    return EXIT_OK


def _cmd_params(args) -> int:
    run = _load_config(args.config)
    params = init_model(run.unet, run.codec, seed=run.train.seed)
    print(param_count(params))
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "viz-attn": _cmd_viz_attn,
    "impro": _cmd_impro,
    "params": _cmd_params,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PromptMatteError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
