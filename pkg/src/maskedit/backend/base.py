"""Backend contract: denoising network, text encoder, and image autoencoder.

A backend exposes instrumented attention sites: every self/cross-attention
layer visit can be observed (Q/K/V and attention weights captured) or have
its output replaced by a hook. The editing pipeline and the controllers are
written against this surface only, so the deterministic toy backend and the
pretrained latent-diffusion adapter are interchangeable in every test.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Protocol, runtime_checkable

import numpy as np

from ..controllers import AttentionSite, SiteKind
from ..errors import DimensionError, ScheduleError

# Replacement hook: called once per head per site visit with 2-D per-head
# matrices; returning None keeps the backend's own attention output.
AttentionHook = Callable[[AttentionSite, int, np.ndarray, np.ndarray, np.ndarray], "np.ndarray | None"]

SiteId = tuple[SiteKind, int]


@dataclass(frozen=True)
class LatentTensor:
    """4-axis latent (batch, channels, height, width) tagged with its schedule timestep."""

    data: np.ndarray
    timestep_tag: int = -1

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 4:
            raise DimensionError(f"latent must be 4-axis (b, c, h, w), got shape {arr.shape}")
        # finiteness is checked where it matters (inversion, sampling), so a
        # failing prediction can surface with step context instead of here
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def with_tag(self, timestep: int) -> "LatentTensor":
        return LatentTensor(self.data, timestep_tag=timestep)


@dataclass(frozen=True)
class PromptEmbedding:
    """Per-token text embedding plus the positions of the object word's tokens."""

    token_embeddings: np.ndarray
    token_texts: tuple[str, ...]
    object_token_positions: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.token_embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise DimensionError("token embeddings must be (n_tokens >= 1, embed_dim)")
        emb.setflags(write=False)
        object.__setattr__(self, "token_embeddings", emb)
        pos = np.asarray(self.object_token_positions, dtype=np.intp).reshape(-1)
        if pos.size and (pos.min() < 0 or pos.max() >= emb.shape[0]):
            raise DimensionError("object token positions out of range")
        pos.setflags(write=False)
        object.__setattr__(self, "object_token_positions", pos)

    @property
    def n_tokens(self) -> int:
        return self.token_embeddings.shape[0]


@dataclass(frozen=True)
class SiteDeclaration:
    """Static facts about one attention layer, in forward execution order."""

    kind: SiteKind
    layer_index: int
    token_grid: tuple[int, int]
    heads: int
    key_dim: int

    @property
    def n_tokens(self) -> int:
        return self.token_grid[0] * self.token_grid[1]

    @property
    def site_id(self) -> SiteId:
        return (self.kind, self.layer_index)


@dataclass(frozen=True)
class BackendDescriptor:
    """Architecture facts the pipeline needs: shapes, sites, noise schedule."""

    name: str
    latent_shape: tuple[int, int, int]
    image_size: tuple[int, int]
    sites: tuple[SiteDeclaration, ...]
    alphas_cumprod: np.ndarray
    n_train_timesteps: int = field(init=False)

    def __post_init__(self):
        alphas = np.asarray(self.alphas_cumprod, dtype=np.float64)
        if alphas.ndim != 1 or len(alphas) < 2:
            raise ScheduleError("alphas_cumprod must be a 1-D schedule")
        if not (np.diff(alphas) < 0).all():
            raise ScheduleError("alphas_cumprod must decrease as noise grows")
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas_cumprod", alphas)
        object.__setattr__(self, "n_train_timesteps", len(alphas))

    @property
    def self_attention_layer_count(self) -> int:
        return sum(1 for s in self.sites if s.kind is SiteKind.SELF_ATTENTION)

    @property
    def cross_attention_layer_count(self) -> int:
        return sum(1 for s in self.sites if s.kind is SiteKind.CROSS_ATTENTION)

    def self_sites(self) -> list[SiteDeclaration]:
        return [s for s in self.sites if s.kind is SiteKind.SELF_ATTENTION]

    def cross_sites(self) -> list[SiteDeclaration]:
        return [s for s in self.sites if s.kind is SiteKind.CROSS_ATTENTION]

    def alpha_bar(self, timestep: int) -> float:
        """Cumulative signal fraction at a timestep; -1 denotes the clean latent."""
        if timestep == -1:
            return 1.0
        if not 0 <= timestep < self.n_train_timesteps:
            raise ScheduleError(f"timestep {timestep} outside schedule [0, {self.n_train_timesteps})")
        return float(self.alphas_cumprod[timestep])

    def inference_timesteps(self, steps: int) -> np.ndarray:
        """Descending timestep grid for a run of ``steps`` denoising iterations."""
        if not 1 <= steps <= self.n_train_timesteps:
            raise ScheduleError(f"steps must lie in [1, {self.n_train_timesteps}]")
        stride = self.n_train_timesteps // steps
        ts = np.arange(1, steps + 1) * stride - 1
        return ts[::-1].copy()

    def fingerprint(self) -> str:
        payload = {
            "name": self.name,
            "latent_shape": list(self.latent_shape),
            "image_size": list(self.image_size),
            "sites": [
                [s.kind.value, s.layer_index, list(s.token_grid), s.heads, s.key_dim]
                for s in self.sites
            ],
            "alphas_sha": hashlib.sha256(self.alphas_cumprod.tobytes()).hexdigest()[:16],
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:20]


@dataclass(frozen=True)
class CaptureSpec:
    """What to record at every site during one forward pass."""

    qkv: bool = False
    probs: bool = False


@dataclass
class SiteCapture:
    """Recorded tensors for one site visit; arrays carry a leading head axis."""

    declaration: SiteDeclaration
    q: np.ndarray | None = None
    k: np.ndarray | None = None
    v: np.ndarray | None = None
    probs: np.ndarray | None = None


@runtime_checkable
class Backend(Protocol):
    descriptor: BackendDescriptor

    def encode_text(self, prompt: str, object_word: str | None = None) -> PromptEmbedding: ...

    def predict_noise(
        self,
        z: LatentTensor,
        timestep: int,
        cond: PromptEmbedding,
        hook: AttentionHook | None = None,
        capture: CaptureSpec | None = None,
        step_index: int = 0,
    ) -> tuple[LatentTensor, dict[SiteId, SiteCapture]]: ...

    def encode_image(self, image) -> LatentTensor: ...

    def decode_latent(self, z: LatentTensor) -> np.ndarray: ...


def sd_alphas_cumprod(n_timesteps: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012) -> np.ndarray:
    """Scaled-linear beta schedule used by the 1.5-series latent diffusion checkpoints."""
    betas = np.linspace(beta_start**0.5, beta_end**0.5, n_timesteps) ** 2
    return np.cumprod(1.0 - betas)
