"""Visual prompts and the three conditioning signals derived from them.

Walks through coordinate/opacity embeddings, prompt rasterization and
attention-mask construction, and writes a few PNGs to ./demo_out/.
"""

from pathlib import Path

import numpy as np

from promptmatte import (
    VisualPrompt,
    attention_mask_build,
    coord_embedding,
    opacity_embedding,
    point_pad,
    rasterize_prompt,
    sinusoidal_encode,
)
from promptmatte.images import save_gray

out = Path("demo_out")
out.mkdir(exist_ok=True)

print("== sinusoidal encodings ==")
print("encode(0, dim=8)      ->", sinusoidal_encode(0.0, 8).round(3))
print("encode(500, dim=8)    ->", sinusoidal_encode(500.0, 8).round(3))
print("opacity 0 first/last  ->", opacity_embedding(0)[:4], opacity_embedding(0)[-4:])

print("\n== point-list padding (total width 1680) ==")
for n in (1, 2, 3, 8, 11, 40):
    pad, per_scalar = point_pad(n)
    print(f"  {n:>3} points -> pad {pad} zeros, {per_scalar} dims per scalar")

print("\n== coordinate embeddings ==")
box = VisualPrompt.box(0.2, 0.3, 0.7, 0.8)
vec, pad = coord_embedding(box)
print(f"box prompt   -> vector of length {len(vec)} (pad {pad})")
pts = VisualPrompt.point([(0.25, 0.25), (0.6, 0.7), (0.8, 0.2)])
vec, pad = coord_embedding(pts)
print(f"3-point prompt -> vector of length {len(vec)} (pad {pad})")

print("\n== rasterization ==")
for prompt, name in [(box, "box"), (pts, "points")]:
    img = rasterize_prompt(prompt, 64, 64)
    save_gray(out / f"raster_{name}.png", img)
    print(f"  {name}: coverage {img.mean():.3f}, wrote raster_{name}.png")

mask_grid = np.zeros((32, 32))
mask_grid[8:20, 10:26] = 1
mask = VisualPrompt.mask(mask_grid)
save_gray(out / "raster_mask.png", rasterize_prompt(mask, 64, 64))

print("\n== attention masks per resolution ==")
for h, w in [(16, 16), (8, 8), (4, 4)]:
    hard = attention_mask_build(box, h, w)
    soft = attention_mask_build(pts, h, w, sigma=0.1)
    print(f"  {h}x{w}: hard cells on {int(hard.grid.sum())}, "
          f"soft peak {soft.grid.max():.3f}, soft mean {soft.grid.mean():.3f}")
    save_gray(out / f"mask_soft_{h}x{w}.png", soft.grid[:, :, None])
print("soft point masks peak at exactly 1 in the cell containing each point.")
