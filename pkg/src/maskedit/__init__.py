"""Zero-shot mask-guided real-image editing for latent diffusion models."""

__version__ = "0.1.0"

from .backend import BackendDescriptor, LatentTensor, PromptEmbedding, ToyBackend
from .controllers import EditSchedule
from .inversion import InversionTrace, ddim_invert
from .mask_input import MaskSpec, SegmentationClient
from .masks import MaskPolicyConfig, SpatialMask, TaskKind
from .pipeline import (
    EditRequest,
    EditResult,
    edit_image,
    multi_region_synthesis,
    text_to_image,
)

__all__ = [
    "BackendDescriptor",
    "EditRequest",
    "EditResult",
    "EditSchedule",
    "InversionTrace",
    "LatentTensor",
    "MaskPolicyConfig",
    "MaskSpec",
    "PromptEmbedding",
    "SegmentationClient",
    "SpatialMask",
    "TaskKind",
    "ToyBackend",
    "__version__",
    "ddim_invert",
    "edit_image",
    "multi_region_synthesis",
    "text_to_image",
]
