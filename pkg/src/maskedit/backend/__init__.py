from .base import (
    AttentionHook,
    Backend,
    BackendDescriptor,
    CaptureSpec,
    LatentTensor,
    PromptEmbedding,
    SiteCapture,
    SiteDeclaration,
    SiteId,
    sd_alphas_cumprod,
)
from .toy import ToyBackend

__all__ = [
    "AttentionHook",
    "Backend",
    "BackendDescriptor",
    "CaptureSpec",
    "LatentTensor",
    "PromptEmbedding",
    "SiteCapture",
    "SiteDeclaration",
    "SiteId",
    "ToyBackend",
    "sd_alphas_cumprod",
]
