"""Adapter for the publicly released 1.5-series latent-diffusion checkpoint.

Optional: requires the ``sd`` extra (torch, diffusers, transformers) and a
local weights directory. The adapter exposes the same descriptor/hook surface
as the toy backend; hooks receive per-head float64 matrices and may replace
each site's attention output, which is how all editing controllers operate.

Site grids and head counts are probed once at load time with a dummy forward
pass, so the descriptor reflects the actual checkpoint configuration.
"""

from __future__ import annotations

import logging

import numpy as np

from ..attention import attention_probs
from ..controllers import AttentionSite, SiteKind
from ..errors import DimensionError, InterventionError, MaskEditError
from .base import (
    BackendDescriptor,
    CaptureSpec,
    LatentTensor,
    PromptEmbedding,
    SiteCapture,
    SiteDeclaration,
)

logger = logging.getLogger(__name__)


def _require_sd_stack():
    try:
        import torch
        from diffusers import AutoencoderKL, DDIMScheduler, UNet2DConditionModel
        from transformers import CLIPTextModel, CLIPTokenizer
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise MaskEditError(
            "the pretrained backend needs the 'sd' extra: pip install 'maskedit[sd]'"
        ) from exc
    return torch, AutoencoderKL, DDIMScheduler, UNet2DConditionModel, CLIPTextModel, CLIPTokenizer


class _InstrumentedProcessor:
    """Attention processor that routes every site visit through the adapter."""

    def __init__(self, adapter: "StableDiffusionBackend", name: str, is_cross: bool):
        self.adapter = adapter
        self.name = name
        self.is_cross = is_cross

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kwargs):
        torch = self.adapter._torch
        residual = hidden_states
        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            b, c, h, w = hidden_states.shape
            hidden_states = hidden_states.view(b, c, h * w).transpose(1, 2)
        context = encoder_hidden_states if encoder_hidden_states is not None else hidden_states

        query = attn.to_q(hidden_states)
        key = attn.to_k(context)
        value = attn.to_v(context)
        heads = attn.heads
        head_dim = query.shape[-1] // heads

        def split(x):
            b, n, _ = x.shape
            return x.view(b, n, heads, head_dim).permute(0, 2, 1, 3)  # (b, heads, n, d)

        q, k, v = split(query), split(key), split(value)
        out = self.adapter._visit_site(self.name, self.is_cross, q, k, v)
        out = out.permute(0, 2, 1, 3).reshape(q.shape[0], q.shape[2], heads * head_dim)
        out = attn.to_out[0](out)
        out = attn.to_out[1](out)
        if input_ndim == 4:
            out = out.transpose(-1, -2).reshape(b, c, h, w)
        if attn.residual_connection:
            out = out + residual
        out = out / attn.rescale_output_factor
        return out


class StableDiffusionBackend:
    """Latent-diffusion backend over local SD-1.5-style weights."""

    MAX_TOKENS = 77

    def __init__(self, weights_path: str | None, device: str = "cpu", precision: str = "fp32"):
        if not weights_path:
            raise MaskEditError("the pretrained backend needs weights_path in the config")
        (torch, AutoencoderKL, DDIMScheduler, UNet2DConditionModel,
         CLIPTextModel, CLIPTokenizer) = _require_sd_stack()
        self._torch = torch
        self.device = torch.device(device)
        self.dtype = torch.float16 if precision == "fp16" else torch.float32

        self.vae = AutoencoderKL.from_pretrained(weights_path, subfolder="vae").to(self.device, self.dtype)
        self.unet = UNet2DConditionModel.from_pretrained(weights_path, subfolder="unet").to(self.device, self.dtype)
        self.text_encoder = CLIPTextModel.from_pretrained(weights_path, subfolder="text_encoder").to(self.device)
        self.tokenizer = CLIPTokenizer.from_pretrained(weights_path, subfolder="tokenizer")
        scheduler = DDIMScheduler.from_pretrained(weights_path, subfolder="scheduler")
        self.vae.eval()
        self.unet.eval()
        self.text_encoder.eval()

        self._names: list[tuple[str, bool]] = []
        processors = {}
        for name in self.unet.attn_processors:
            is_cross = name.endswith("attn2.processor")
            self._names.append((name, is_cross))
            processors[name] = _InstrumentedProcessor(self, name, is_cross)
        self.unet.set_attn_processor(processors)

        # per-forward visit context
        self._hook = None
        self._capture: CaptureSpec | None = None
        self._captures: dict = {}
        self._step_index = 0
        self._declarations: dict[str, SiteDeclaration] = {}

        image_size = 512
        latent = image_size // 8
        self._probe_sites(latent)
        alphas = np.asarray(scheduler.alphas_cumprod.cpu().numpy(), dtype=np.float64)
        self.descriptor = BackendDescriptor(
            name="sd-1.5",
            latent_shape=(self.unet.config.in_channels, latent, latent),
            image_size=(image_size, image_size),
            sites=tuple(self._declarations[name] for name, _ in self._names),
            alphas_cumprod=alphas,
        )

    # ------------------------------------------------------------- probing

    def _probe_sites(self, latent: int) -> None:
        torch = self._torch
        self._probe_grids: dict[str, tuple[int, int]] = {}
        self._probing = True
        try:
            with torch.no_grad():
                z = torch.zeros(1, self.unet.config.in_channels, latent, latent,
                                device=self.device, dtype=self.dtype)
                emb = torch.zeros(1, self.MAX_TOKENS, self.unet.config.cross_attention_dim,
                                  device=self.device, dtype=self.dtype)
                self.unet(z, 0, encoder_hidden_states=emb)
        finally:
            self._probing = False
        self_idx = cross_idx = 0
        for name, is_cross in self._names:
            grid, heads, key_dim = self._probe_grids[name]
            if is_cross:
                decl = SiteDeclaration(SiteKind.CROSS_ATTENTION, cross_idx, grid, heads, key_dim)
                cross_idx += 1
            else:
                decl = SiteDeclaration(SiteKind.SELF_ATTENTION, self_idx, grid, heads, key_dim)
                self_idx += 1
            self._declarations[name] = decl

    # ----------------------------------------------------------- site visit

    def _visit_site(self, name: str, is_cross: bool, q, k, v):
        torch = self._torch
        if getattr(self, "_probing", False):
            n_tokens = q.shape[2]
            side = int(round(n_tokens**0.5))
            self._probe_grids[name] = ((side, side), q.shape[1], q.shape[3])
            return self._default_attention(q, k, v)

        decl = self._declarations[name]
        site = AttentionSite(self._step_index, decl.layer_index, decl.kind, decl.token_grid)
        replaced = None
        if self._hook is not None:
            head_outputs = []
            any_replaced = False
            for h in range(q.shape[1]):
                q_np = q[0, h].detach().to(torch.float64).cpu().numpy()
                k_np = k[0, h].detach().to(torch.float64).cpu().numpy()
                v_np = v[0, h].detach().to(torch.float64).cpu().numpy()
                out_h = self._hook(site, h, q_np, k_np, v_np)
                if out_h is None:
                    head_outputs.append(None)
                else:
                    out_h = np.asarray(out_h)
                    if out_h.shape != (q.shape[2], v.shape[3]):
                        raise InterventionError(
                            f"hook at {decl.kind.value} layer {decl.layer_index} returned shape "
                            f"{out_h.shape}, expected {(q.shape[2], v.shape[3])}"
                        )
                    head_outputs.append(out_h)
                    any_replaced = True
            if any_replaced:
                default = self._default_attention(q, k, v)
                stacked = []
                for h, out_h in enumerate(head_outputs):
                    if out_h is None:
                        stacked.append(default[0, h])
                    else:
                        stacked.append(torch.from_numpy(out_h).to(self.device, q.dtype))
                replaced = torch.stack(stacked)[None]

        out = replaced if replaced is not None else self._default_attention(q, k, v)
        if self._capture is not None:
            entry = SiteCapture(declaration=decl)
            if self._capture.qkv:
                entry.q = q[0].detach().to(torch.float64).cpu().numpy()
                entry.k = k[0].detach().to(torch.float64).cpu().numpy()
                entry.v = v[0].detach().to(torch.float64).cpu().numpy()
            if self._capture.probs and replaced is None:
                entry.probs = np.stack([
                    attention_probs(
                        q[0, h].detach().to(torch.float64).cpu().numpy(),
                        k[0, h].detach().to(torch.float64).cpu().numpy(),
                    )
                    for h in range(q.shape[1])
                ])
            self._captures[decl.site_id] = entry
        return out

    def _default_attention(self, q, k, v):
        torch = self._torch
        return torch.nn.functional.scaled_dot_product_attention(q, k, v)

    # -------------------------------------------------------------- public

    def encode_text(self, prompt: str, object_word: str | None = None) -> PromptEmbedding:
        torch = self._torch
        tokens = self.tokenizer(
            prompt, padding="max_length", max_length=self.MAX_TOKENS,
            truncation=True, return_tensors="pt",
        )
        with torch.no_grad():
            emb = self.text_encoder(tokens.input_ids.to(self.device))[0][0]
        token_texts = tuple(self.tokenizer.convert_ids_to_tokens(tokens.input_ids[0]))
        positions = []
        if object_word:
            word_ids = self.tokenizer(object_word, add_special_tokens=False).input_ids
            ids = tokens.input_ids[0].tolist()
            for start in range(len(ids) - len(word_ids) + 1):
                if ids[start : start + len(word_ids)] == word_ids:
                    positions.extend(range(start, start + len(word_ids)))
        return PromptEmbedding(
            token_embeddings=emb.to(torch.float64).cpu().numpy(),
            token_texts=token_texts,
            object_token_positions=np.asarray(sorted(set(positions)), dtype=np.intp),
        )

    def encode_image(self, image) -> LatentTensor:
        torch = self._torch
        from ..images import load_image

        arr = load_image(image)
        if arr.shape[:2] != self.descriptor.image_size:
            from PIL import Image as PILImage

            from ..images import to_uint8

            pil = PILImage.fromarray(to_uint8(arr), "RGB").resize(self.descriptor.image_size[::-1])
            arr = np.asarray(pil, dtype=np.float64) / 255.0
        tensor = torch.from_numpy(arr * 2.0 - 1.0).permute(2, 0, 1)[None].to(self.device, self.dtype)
        with torch.no_grad():
            posterior = self.vae.encode(tensor).latent_dist
            z = posterior.mean * self.vae.config.scaling_factor
        return LatentTensor(z.to(torch.float64).cpu().numpy())

    def decode_latent(self, z: LatentTensor) -> np.ndarray:
        torch = self._torch
        tensor = torch.from_numpy(np.asarray(z.data)).to(self.device, self.dtype)
        with torch.no_grad():
            image = self.vae.decode(tensor / self.vae.config.scaling_factor).sample
        image = (image / 2 + 0.5).clamp(0, 1)
        return image[0].permute(1, 2, 0).to(torch.float64).cpu().numpy()

    def predict_noise(
        self,
        z: LatentTensor,
        timestep: int,
        cond: PromptEmbedding,
        hook=None,
        capture: CaptureSpec | None = None,
        step_index: int = 0,
    ):
        torch = self._torch
        if z.data.shape != (1, *self.descriptor.latent_shape):
            raise DimensionError(
                f"latent shape {z.data.shape} != (1, {self.descriptor.latent_shape})"
            )
        self._hook = hook
        self._capture = capture
        self._captures = {}
        self._step_index = step_index
        try:
            latent = torch.from_numpy(np.asarray(z.data)).to(self.device, self.dtype)
            emb = torch.from_numpy(np.asarray(cond.token_embeddings))[None].to(self.device, self.dtype)
            with torch.no_grad():
                eps = self.unet(latent, max(timestep, 0), encoder_hidden_states=emb).sample
            captures = self._captures
        finally:
            self._hook = None
            self._capture = None
            self._captures = {}
        return LatentTensor(eps.to(torch.float64).cpu().numpy(), timestep_tag=timestep), captures
