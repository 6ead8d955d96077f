"""Visual-prompt interactive matting at desk scale.

A numpy-based stack: a small reverse-mode autodiff tensor engine, prompt
encodings (coordinate/opacity embeddings, attention masks, rasterization),
masked self-attention and prompt cross-attention blocks, a miniature
one-step U-Net with a pixel/latent codec, a synthetic compositing scene
generator, the five standard matting metrics with relative-improvement
aggregation, and a training/evaluation loop.
"""

from .attention import (
    AttentionParams,
    export_attention_map,
    masked_self_attention,
    prompt_cross_attention,
)
from .codec import CodecConfig, decode, encode
from .config import MetricConventions, RunConfig, load_run_config, run_config_from_dict
from .errors import (
    CapacityError,
    DimensionError,
    GenerationError,
    GraphStateError,
    PromptMatteError,
    TrainingError,
)
from .metrics import MetricRow, all_metrics, conn_metric, grad_metric, impro, pixel_metrics
from .prompts import (
    AttentionMask,
    CondEmbedding,
    VisualPrompt,
    attention_mask_build,
    build_attention_masks,
    cond_embedding,
    coord_embedding,
    mask_bbox,
    opacity_embedding,
    parse_prompt_file,
    point_pad,
    rasterize_prompt,
    sinusoidal_encode,
)
from .serialization import load_checkpoint, load_tensor, save_checkpoint, save_tensor
from .synth import (
    SynthScene,
    composite,
    gen_foreground,
    generate_dataset,
    load_scene,
    make_scene,
    sample_prompts,
)
from .tensor import Tensor, backward, check_gradient
from .training import (
    EvalReport,
    TrainConfig,
    adamw_step,
    evaluate,
    lr_schedule,
    matting_loss,
    predict_alpha,
    train_loop,
)
from .unet import (
    AttentionPlacement,
    UNetConfig,
    duplicate_input_conv,
    init_model,
    param_count,
    unet_forward,
)

__version__ = "0.1.0"
