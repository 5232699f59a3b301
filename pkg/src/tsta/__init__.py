"""Trainable sliding-tile attention for spatio-temporal latent diffusion.

Block-sparse tile attention with timestep-dependent windows, a differentiable
soft-window relaxation, a small numpy diffusion transformer, and a
dense-vs-sparse benchmark harness.
"""
from .attention import (
    AttentionGrads,
    AttentionInputs,
    AttentionOutput,
    SoftWindowParams,
    attention_backward,
    dense_attention,
    flop_count,
    soft_window_attention,
    sparse_tile_attention,
)
from .bench import BenchConfig, BenchReport, emit_report, run_attention_bench
from .diffusion import (
    ConditionEmbedding,
    NoiseSchedule,
    diffusion_loss,
    forward_noise,
    make_condition,
    make_noise_schedule,
    null_condition,
    rescaled_noise_schedule,
    sample,
)
from .errors import (
    CorrectnessGateError,
    DivergenceError,
    DivisibilityError,
    EmptyRowError,
    EvenWindowError,
    MaskMismatchError,
    OutOfRangeError,
    ShapeError,
    TSTAError,
    ValidationError,
    ZeroSizeError,
    ZeroWindowError,
)
from .grid import GridSpec, coord_to_tile, coord_to_token, make_grid, tile_coord, tile_idx, token_to_coord
from .mask import (
    BlockMask,
    WindowSchedule,
    build_cross_modal_mask,
    build_sliding_tile_mask,
    deserialize_mask,
    expand_to_token_mask,
    make_window_schedule,
    mask_density,
    serialize_mask,
    window_at,
)
from .metrics import psnr, ssim
from .model import (
    Denoiser,
    DenoiserConfig,
    denoise_step,
    desk_config,
    freeze_schedule,
    init_model,
    load_checkpoint,
    make_synthetic_dataset,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
