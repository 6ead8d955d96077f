"""The two attention mechanisms, shown numerically on small instances.

Masked self-attention: a per-key bias derived from the prompt mask steers
the score matrix (all-ones mask reduces to plain attention, a zeroed key
is excluded).  Prompt cross-attention: the zero convolution makes a fresh
layer prompt-blind; perturbing it wakes the prompt path up.
"""

import numpy as np

from promptmatte.attention import (
    gather_params,
    init_cross_attention,
    init_self_attention,
    masked_self_attention,
    prompt_cross_attention,
)
from promptmatte.tensor import Tensor

rng = np.random.default_rng(0)

print("== masked self-attention ==")
raw = init_self_attention(channels=8, heads=2, rng=rng, dtype=np.float64)
params = gather_params({f"a.{k}": Tensor(v) for k, v in raw.items()}, "a", heads=2)
x = Tensor(rng.normal(size=(1, 4, 8)) * 0.5, dtype=np.float64)

plain = masked_self_attention(x, None, params)
ones = masked_self_attention(x, np.ones(4), params)
print("  |all-ones mask - unmasked| =", float(np.abs(ones.data - plain.data).max()))

record = []
masked_self_attention(x, np.array([1.0, 1.0, 0.0, 1.0]), params, record=record)
probs = record[0]["probs"]
print("  weight on the masked-out key:", float(probs[0, :, :, 2].max()))
print("  attention rows sum to:", float(probs.sum(axis=-1).mean()))

soft = np.array([1.0, 0.6, 0.2, 0.05])
record = []
masked_self_attention(x, soft, params, record=record)
print("  mean weight per key under soft mask", soft, "->",
      record[0]["probs"].mean(axis=(0, 1, 2)).round(3))

print("\n== prompt cross-attention with zero convolution ==")
raw = init_cross_attention(channels=8, context_channels=6, prompt_channels=4,
                           heads=2, rng=rng, dtype=np.float64)
cparams = gather_params({f"c.{k}": Tensor(v) for k, v in raw.items()}, "c", heads=2)
prompt_a = Tensor(rng.normal(size=(1, 4, 4, 4)), dtype=np.float64)
prompt_b = Tensor(rng.normal(size=(1, 4, 4, 4)), dtype=np.float64)

out_a = prompt_cross_attention(x, prompt_a, cparams)
out_b = prompt_cross_attention(x, prompt_b, cparams)
print("  fresh layer, two different prompts: |out_a - out_b| =",
      float(np.abs(out_a.data - out_b.data).max()), "(zero conv nullifies the prompt)")

cparams.zero_conv_w.data[:] = rng.normal(size=cparams.zero_conv_w.shape) * 0.3
out_a = prompt_cross_attention(x, prompt_a, cparams)
out_b = prompt_cross_attention(x, prompt_b, cparams)
print("  perturbed zero conv:               |out_a - out_b| =",
      float(np.abs(out_a.data - out_b.data).max()), "(prompt now matters)")
