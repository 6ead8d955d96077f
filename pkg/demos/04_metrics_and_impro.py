"""The five matting metrics and the relative-improvement aggregation.

Shows metric behavior on controlled corruptions of a ground-truth matte,
then replicates published improvement percentages from their metric rows.
"""

import numpy as np

from promptmatte import all_metrics, impro
from promptmatte.seeding import subrng
from promptmatte.synth import gen_foreground

_, alpha = gen_foreground("disk", subrng(5, 0), size=64, radius=14.0)
gt = alpha[:, :, 0]

print("== metric behavior on corrupted mattes ==")
print(f"{'corruption':<24} {'MSE':>8} {'MAD':>8} {'SAD':>8} {'Grad':>8} {'Conn':>8}")
cases = {
    "identical": gt.copy(),
    "gaussian noise 0.05": np.clip(gt + subrng(5, 1).normal(0, 0.05, gt.shape), 0, 1),
    "shifted by 2 px": np.roll(gt, 2, axis=1),
    "eroded (duller edge)": np.clip(gt * 0.8, 0, 1),
    "stray blob added": None,
}
stray = gt.copy()
stray[4:9, 4:9] = 1.0
cases["stray blob added"] = stray
for name, pred in cases.items():
    row = all_metrics(pred, gt)
    print(f"{name:<24} {row.mse:>8.4f} {row.mad:>8.4f} {row.sad:>8.4f} "
          f"{row.grad:>8.4f} {row.conn:>8.4f}")
print("(the stray blob barely moves MSE but shows up in Conn; the shift "
      "dominates Grad)")

print("\n== relative improvement over a baseline (percent, 5-metric rows) ==")
published = [
    ("natural / point", (0.0302, 0.0388, 66.27, 46.63, 18.77),
     (0.0109, 0.0189, 31.80, 26.84, 17.51), 43.27),
    ("animal / point", (0.0302, 0.0366, 62.61, 33.82, 15.93),
     (0.0060, 0.0104, 17.54, 13.17, 10.86), 63.32),
    ("natural / mask", (0.0155, 0.0285, 48.28, 20.78, 20.26),
     (0.0027, 0.0087, 14.53, 16.94, 10.95), 57.28),
]
for name, base, method, expected in published:
    got = impro(base, method)
    print(f"  {name:<16} computed {got:6.2f}%   published {expected:6.2f}%")

print("\n== 8-value ablation rows (MSE+SAD over 2 benchmarks x 2 prompts) ==")
base = (0.0169, 44.23, 0.0115, 26.54, 0.0098, 28.55, 0.0054, 14.63)
both = (0.0139, 40.18, 0.0107, 25.14, 0.0077, 24.26, 0.0052, 14.29)
print(f"  both-embeddings row: computed {impro(base, both):.2f}%  published 10.20%")
