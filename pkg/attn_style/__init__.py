"""
Modules exported by this package:

- `stylize`: Stylize a content image with a style image using a trained toy diffusion U-Net, by injecting
 the style image's self-attention keys and values into the content image's generation.

- `attention_std_report`: Per-timestep spread of the attention logits with and without style injection.

- `cfsd`, `rgb_uv_histogram`, `histogram_loss`, `psnr`: content-fidelity and color-transfer metrics.

- `generate_dataset`, `train`: procedural training images and the toy training loop.

- `UNetConfig`, `StyleIdConfig`, `TrainConfig`, `ProceduralSpec`: option objects of the above.
"""

from attn_style.checkpoint import load_checkpoint, load_model, save_checkpoint  # noqa: F401
from attn_style.dataset import ProceduralSpec, generate_dataset, write_dataset  # noqa: F401
from attn_style.ddim import StepSchedule, ddim_invert, ddim_sample, reconstruct  # noqa: F401
from attn_style.exc import (  # noqa: F401
    CacheMissError,
    CheckpointError,
    ConfigurationError,
    DegenerateInputWarning,
    MissingGradientError,
    NormalizationError,
    NumericError,
    OrderingError,
    RangeError,
    ShapeError,
    StyleTransferError,
    TrainingDivergedError,
)
from attn_style.hooks import PASS, AttentionHook  # noqa: F401
from attn_style.injection import StyleIdConfig, StyleTransfer, attention_std_report, stylize  # noqa: F401
from attn_style.metrics import cfsd, histogram_loss, psnr, rgb_uv_histogram  # noqa: F401
from attn_style.model import UNetConfig, UNetWeights, unet_forward  # noqa: F401
from attn_style.noise import build_noise_schedule, q_sample  # noqa: F401
from attn_style.tensor import GradTape, Tensor  # noqa: F401
from attn_style.trainer import TrainConfig, train  # noqa: F401


__version__ = "0.1.0"
