"""Deterministic toy backend for tests and CPU-only runs.

Smallest structure exercising the full hook surface: an orthogonal-affine
"autoencoder" mapping 16x16 RGB images to a (12, 8, 8) latent, and a two-
block denoiser where each block pools the latent to its token grid, applies
one self-attention and one cross-attention site, and contributes back to the
noise prediction. Every weight is drawn from one seeded generator, so two
instances with the same seed are bitwise identical.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..attention import attention_probs, scaled_dot_attention
from ..controllers import AttentionSite, SiteKind
from ..errors import DimensionError, InterventionError
from .base import (
    AttentionHook,
    BackendDescriptor,
    CaptureSpec,
    LatentTensor,
    PromptEmbedding,
    SiteCapture,
    SiteDeclaration,
)

logger = logging.getLogger(__name__)

_WORD = re.compile(r"[a-z0-9]+")


def toy_alphas_cumprod(n_timesteps: int = 1000) -> np.ndarray:
    """Gentler schedule than the pretrained checkpoints use.

    Keeps sqrt(1 / alpha_bar_T) small so the deterministic inversion round
    trip converges fast in the step count; the toy exercises the sampler's
    mechanics, not a particular checkpoint's noise levels.
    """
    betas = np.linspace(1e-5, 2e-3, n_timesteps)
    return np.cumprod(1.0 - betas)


@dataclass
class _Block:
    grid: tuple[int, int]
    w_in: np.ndarray
    b_in: np.ndarray
    wq_self: np.ndarray
    wk_self: np.ndarray
    wv_self: np.ndarray
    wq_cross: np.ndarray
    wk_cross: np.ndarray
    wv_cross: np.ndarray
    w_out: np.ndarray


class ToyBackend:
    """Seeded, pure-numpy backend; safe to share across threads (stateless forward)."""

    IMAGE_SIZE = (16, 16)
    LATENT_SHAPE = (12, 8, 8)
    FEATURE_DIM = 16
    EMBED_DIM = 16
    MAX_TOKENS = 77
    RESIDUAL_WEIGHT = 0.5
    OUTPUT_SCALE = 0.05

    def __init__(self, seed: int = 0, on_size_mismatch: str = "resize"):
        if on_size_mismatch not in ("resize", "reject"):
            raise ValueError("on_size_mismatch must be 'resize' or 'reject'")
        self.seed = seed
        self.on_size_mismatch = on_size_mismatch
        rng = np.random.default_rng(seed)

        n = int(np.prod(self.LATENT_SHAPE))
        vae, _ = np.linalg.qr(rng.normal(size=(n, n)))
        self._vae = vae

        d, e = self.FEATURE_DIM, self.EMBED_DIM
        c = self.LATENT_SHAPE[0]

        def mat(rows, cols):
            return rng.normal(size=(rows, cols)) / np.sqrt(rows)

        self._blocks = [
            _Block(
                grid=grid,
                w_in=mat(c, d),
                b_in=rng.normal(size=d) * 0.1,
                wq_self=mat(d, d),
                wk_self=mat(d, d),
                wv_self=mat(d, d),
                wq_cross=mat(d, d),
                wk_cross=mat(e, d),
                wv_cross=mat(e, d),
                w_out=mat(d, c),
            )
            for grid in ((8, 8), (4, 4))
        ]

        sites = []
        for layer, block in enumerate(self._blocks):
            sites.append(SiteDeclaration(SiteKind.SELF_ATTENTION, layer, block.grid, heads=1, key_dim=d))
            sites.append(SiteDeclaration(SiteKind.CROSS_ATTENTION, layer, block.grid, heads=1, key_dim=d))
        self.descriptor = BackendDescriptor(
            name=f"toy-{seed}",
            latent_shape=self.LATENT_SHAPE,
            image_size=self.IMAGE_SIZE,
            sites=tuple(sites),
            alphas_cumprod=toy_alphas_cumprod(),
        )

    # ------------------------------------------------------------------ text

    def encode_text(self, prompt: str, object_word: str | None = None) -> PromptEmbedding:
        tokens = _WORD.findall(prompt.lower())
        if not tokens:
            tokens = ["<null>"]
        if len(tokens) > self.MAX_TOKENS:
            logger.warning("prompt truncated from %d to %d tokens", len(tokens), self.MAX_TOKENS)
            tokens = tokens[: self.MAX_TOKENS]
        emb = np.stack([self.token_vector(t) for t in tokens])
        positions = []
        if object_word:
            object_tokens = set(_WORD.findall(object_word.lower()))
            positions = [i for i, t in enumerate(tokens) if t in object_tokens]
        return PromptEmbedding(
            token_embeddings=emb,
            token_texts=tuple(tokens),
            object_token_positions=np.asarray(positions, dtype=np.intp),
        )

    def token_vector(self, token: str) -> np.ndarray:
        """Seeded hash projection: one fixed unit vector per token string."""
        digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = rng.normal(size=self.EMBED_DIM)
        return vec / np.linalg.norm(vec)

    # ----------------------------------------------------------------- image

    def encode_image(self, image) -> LatentTensor:
        arr = self._to_float_image(image)
        flat = (arr - 0.5).reshape(-1)
        z = (self._vae @ flat).reshape(self.LATENT_SHAPE)
        return LatentTensor(z[None])

    def decode_latent(self, z: LatentTensor) -> np.ndarray:
        data = np.asarray(z.data, dtype=np.float64)
        if data.shape != (1, *self.LATENT_SHAPE):
            raise DimensionError(f"latent shape {data.shape} != (1, {self.LATENT_SHAPE})")
        flat = self._vae.T @ data.reshape(-1)
        h, w = self.IMAGE_SIZE
        return flat.reshape(h, w, 3) + 0.5

    def _to_float_image(self, image) -> np.ndarray:
        if isinstance(image, Image.Image):
            image = image.convert("RGB")
            if image.size != self.IMAGE_SIZE[::-1]:
                if self.on_size_mismatch == "reject":
                    raise DimensionError(
                        f"image size {image.size} != required {self.IMAGE_SIZE[::-1]}"
                    )
                image = image.resize(self.IMAGE_SIZE[::-1], Image.BILINEAR)
            arr = np.asarray(image, dtype=np.float64) / 255.0
            return arr
        arr = np.asarray(image, dtype=np.float64)
        if arr.shape != (*self.IMAGE_SIZE, 3):
            if self.on_size_mismatch == "reject":
                raise DimensionError(f"image shape {arr.shape} != {(*self.IMAGE_SIZE, 3)}")
            pil = Image.fromarray(np.clip(arr * 255, 0, 255).astype(np.uint8), "RGB")
            arr = np.asarray(pil.resize(self.IMAGE_SIZE[::-1], Image.BILINEAR), dtype=np.float64) / 255.0
        if arr.max() > 1.0 + 1e-9:
            arr = arr / 255.0
        return arr

    # --------------------------------------------------------------- forward

    def time_scale(self, timestep: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel sinusoidal scale and shift for a schedule timestep."""
        c = self.LATENT_SHAPE[0]
        t_hat = max(int(timestep), 0) / self.descriptor.n_train_timesteps
        freqs = (np.arange(c) + 1.0) / c
        scale = 1.0 + 0.1 * np.sin(np.pi * t_hat * freqs)
        shift = 0.05 * np.cos(np.pi * t_hat * freqs)
        return scale, shift

    def predict_noise(
        self,
        z: LatentTensor,
        timestep: int,
        cond: PromptEmbedding,
        hook: AttentionHook | None = None,
        capture: CaptureSpec | None = None,
        step_index: int = 0,
    ) -> tuple[LatentTensor, dict]:
        data = np.asarray(z.data, dtype=np.float64)
        if data.shape != (1, *self.LATENT_SHAPE):
            raise DimensionError(f"latent shape {data.shape} != (1, {self.LATENT_SHAPE})")
        x = data[0]
        scale, shift = self.time_scale(timestep)
        h_img = x * scale[:, None, None] + shift[:, None, None]

        captures: dict = {}
        y = np.zeros_like(x)
        for layer, block in enumerate(self._blocks):
            g = block.grid[0]
            pooled = h_img.reshape(x.shape[0], g, 8 // g, g, 8 // g).mean(axis=(2, 4))
            tokens = pooled.reshape(x.shape[0], -1).T  # (g*g, channels)
            feats = np.tanh(tokens @ block.w_in + block.b_in)

            q = feats @ block.wq_self
            k = feats @ block.wk_self
            v = feats @ block.wv_self
            out = self._run_site(
                SiteDeclaration(SiteKind.SELF_ATTENTION, layer, block.grid, 1, self.FEATURE_DIM),
                q, k, v, hook, capture, captures, step_index,
            )
            feats = feats + self.RESIDUAL_WEIGHT * out

            q2 = feats @ block.wq_cross
            k2 = cond.token_embeddings @ block.wk_cross
            v2 = cond.token_embeddings @ block.wv_cross
            out2 = self._run_site(
                SiteDeclaration(SiteKind.CROSS_ATTENTION, layer, block.grid, 1, self.FEATURE_DIM),
                q2, k2, v2, hook, capture, captures, step_index,
            )
            feats = feats + self.RESIDUAL_WEIGHT * out2

            contrib = (feats @ block.w_out).T.reshape(x.shape[0], g, g)
            y += np.repeat(np.repeat(contrib, 8 // g, axis=1), 8 // g, axis=2)

        eps = self.OUTPUT_SCALE * (h_img + y)
        return LatentTensor(eps[None], timestep_tag=timestep), captures

    def _run_site(self, decl, q, k, v, hook, capture, captures, step_index) -> np.ndarray:
        site = AttentionSite(step_index, decl.layer_index, decl.kind, decl.token_grid)
        out = None
        if hook is not None:
            out = hook(site, 0, q, k, v)
            if out is not None:
                out = np.asarray(out, dtype=np.float64)
                if out.shape != (decl.n_tokens, v.shape[1]):
                    raise InterventionError(
                        f"hook at {decl.kind.value} layer {decl.layer_index} returned shape "
                        f"{out.shape}, expected {(decl.n_tokens, v.shape[1])}"
                    )
        replaced = out is not None
        if out is None:
            out = scaled_dot_attention(q, k, v)
        if capture is not None:
            entry = SiteCapture(declaration=decl)
            if capture.qkv:
                entry.q, entry.k, entry.v = q[None].copy(), k[None].copy(), v[None].copy()
            if capture.probs and not replaced:
                entry.probs = attention_probs(q, k)[None]
            captures[decl.site_id] = entry
        return out
