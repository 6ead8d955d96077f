"""Train a small model end to end and inspect what it learned.

Uses a reduced configuration (about a minute of CPU time) rather than the
full acceptance run; pass --steps to change the budget.  Writes the
checkpoint, a loss curve, predictions and a cross-attention map under
./demo_out/toy/.
"""

import argparse
from pathlib import Path

import numpy as np

from promptmatte import RunConfig, TrainConfig, UNetConfig, CodecConfig, init_model
from promptmatte.config import MetricConventions
from promptmatte.images import save_gray, save_rgb
from promptmatte.seeding import subrng
from promptmatte.synth import make_scene
from promptmatte.training import (
    attention_map_for_scene,
    predict_alpha,
    selection_rate,
    train_loop,
)

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=600)
args = parser.parse_args()

out = Path("demo_out") / "toy"
out.mkdir(parents=True, exist_ok=True)

run = RunConfig(
    unet=UNetConfig(base_channels=16, channel_mults=(1, 2), blocks_per_level=1,
                    heads=2, d_cond=64, context_channels=16, norm_groups=4),
    codec=CodecConfig(downsample_factor=4, latent_channels=4, mode="learned"),
    train=TrainConfig(epochs=1, scenes_per_epoch=args.steps, image_size=48,
                      warmup_steps=50, seed=3),
    mask_sigma=0.1,
    metrics=MetricConventions(),
)
params = init_model(run.unet, run.codec, seed=run.train.seed)

print(f"training {args.steps} steps on 48x48 scenes ...")
curve = train_loop(params, run, out_dir=out / "ckpt",
                   progress=lambda s, t, l: print(f"  step {s+1}/{t} loss {l:.4f}")
                   if (s + 1) % 100 == 0 else None)
losses = [l for _, _, l in curve]
print(f"loss: first-50 mean {np.mean(losses[:50]):.4f}  "
      f"last-50 mean {np.mean(losses[-50:]):.4f}")

print("\npredictions on held-out duplication scenes:")
scenes = [make_scene(subrng(99, i), duplicate_prob=1.0, size=48) for i in range(20)]
print("  prompted-instance selection rate:",
      selection_rate(params, run, scenes))

scene = scenes[0]
pred = predict_alpha(params, run, scene.image, scene.prompt, scene.opacity)
save_rgb(out / "scene.png", scene.image)
save_gray(out / "gt_alpha.png", scene.gt_alpha)
save_gray(out / "pred_alpha.png", pred.data[0, 0])
print("  wrote scene.png / gt_alpha.png / pred_alpha.png")

grid, degenerate, hw = attention_map_for_scene(params, run, scene.image,
                                               scene.prompt, scene.opacity)
print(f"  cross-attention map at {hw[0]}x{hw[1]} "
      f"({'degenerate' if degenerate else 'structured'})")
save_gray(out / "attention_map.png",
          np.repeat(np.repeat(grid, 48 // hw[0], 0), 48 // hw[1], 1))
print("  wrote attention_map.png")
