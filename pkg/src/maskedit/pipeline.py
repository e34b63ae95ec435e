"""End-to-end editing: encode, invert, per-step mask policy, hooked denoising.

Per denoising step the loop runs exactly three forward passes: one on the
trace latent under null text (source features), one conditional and one
unconditional pass on the current latent. Both current-latent passes carry
the self-attention rewrite; the conditional pass additionally partitions
cross-attention between the prompt and null text (on the unconditional pass
that partition is a no-op by construction, which keeps the two guidance
branches structurally symmetric). Cross-attention maps recorded during the
conditional pass feed the mask-refinement policy of later steps.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attention import attention_probs, scaled_dot_attention, scatter
from .backend.base import Backend, CaptureSpec, LatentTensor, PromptEmbedding, SiteId
from .controllers import (
    AttentionSite,
    CrossAttentionAggregate,
    EditSchedule,
    SiteKind,
    compose_location,
    localized_cross_attention,
    preserve_background,
    preserve_foreground,
    record_cross_attention,
    should_use_normal_self_attention,
)
from .errors import (
    CoverageError,
    DimensionError,
    EmptyMaskError,
    InvalidMaskError,
    ScheduleError,
)
from .images import image_digest, load_image
from .inversion import InversionTrace, ddim_invert
from .mask_input import MaskSpec, SegmentationClient, resolve_mask
from .masks import (
    MaskPolicyConfig,
    SpatialMask,
    TaskKind,
    area_average_resample,
    resample_mask,
    target_mask_policy,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EditRequest:
    """One unit of editing work, shared by the library, CLI, service, and UI."""

    image: object
    source_mask: MaskSpec
    target_prompt: str
    task: TaskKind
    object_word: str = ""
    schedule: EditSchedule = field(default_factory=EditSchedule)
    mask_policy: MaskPolicyConfig = field(default_factory=MaskPolicyConfig)
    guidance_scale: float = 7.5
    steps: int = 50
    seed: int = 0
    controllers_enabled: bool = True  # ablation switch: False = vanilla resampling

    def __post_init__(self):
        if self.guidance_scale < 1.0:
            raise DimensionError("guidance_scale must be >= 1")
        if not 10 <= self.steps <= 200:
            raise DimensionError("steps must lie in [10, 200]")
        # empty prompt means "null text": legal for removal and for the
        # no-edit control (region task), required nonempty everywhere else
        if self.task not in (TaskKind.REMOVE_OBJECT, TaskKind.MODIFY_REGION):
            if not self.target_prompt.strip():
                raise DimensionError(f"target prompt must be nonempty for task {self.task.value!r}")

    def echo(self) -> dict:
        """Reproducible request record for manifests and fingerprints."""
        return {
            "image": str(self.image) if isinstance(self.image, (str, Path)) else f"array:{image_digest(self.image)}",
            "source_mask": self.source_mask.to_json(),
            "target_prompt": self.target_prompt,
            "object_word": self.object_word,
            "task": self.task.value,
            "schedule": {
                "step_threshold": self.schedule.step_threshold,
                "layer_threshold": self.schedule.layer_threshold,
                "normal_attention_fraction": self.schedule.normal_attention_fraction,
                "mask_switch_step": self.schedule.mask_switch_step,
                "rng_seed": self.schedule.rng_seed,
                "retain_object": self.schedule.retain_object,
                "background_from_source": self.schedule.background_from_source,
            },
            "mask_policy": {
                "hull_dilation_px": self.mask_policy.hull_dilation_px,
                "expand_px": self.mask_policy.expand_px,
                "refinement": self.mask_policy.refinement.value,
                "binarize_rule": self.mask_policy.binarize_rule.value,
                "fixed_threshold": self.mask_policy.fixed_threshold,
            },
            "guidance_scale": self.guidance_scale,
            "steps": self.steps,
            "seed": self.seed,
            "controllers_enabled": self.controllers_enabled,
        }


@dataclass
class EditResult:
    image: np.ndarray
    final_latent: LatentTensor
    target_mask_record: list[SpatialMask]
    timings: dict[str, float]
    fingerprint: str
    request_echo: dict
    backend_fingerprint: str
    forward_passes: int

    def manifest(self) -> dict:
        """Run manifest; everything outside "timing" is reproducible."""
        return {
            "version": __version__,
            "request": self.request_echo,
            "backend_fingerprint": self.backend_fingerprint,
            "fingerprint": self.fingerprint,
            "forward_passes": self.forward_passes,
            "target_masks_sha256": [
                hashlib.sha256(m.binary().tobytes()).hexdigest()[:16] for m in self.target_mask_record
            ],
            "image_sha256": hashlib.sha256(np.ascontiguousarray(self.image).tobytes()).hexdigest(),
            "timing": self.timings,
        }


# ------------------------------------------------------------ sampler math


def classifier_free_guidance(eps_cond: LatentTensor, eps_uncond: LatentTensor, scale: float) -> LatentTensor:
    """eps_uncond + scale * (eps_cond - eps_uncond); scales 0 and 1 short-circuit exactly."""
    if eps_cond.shape != eps_uncond.shape:
        raise DimensionError("guidance branches disagree on latent shape")
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_uncond
    data = eps_uncond.data + scale * (eps_cond.data - eps_uncond.data)
    return LatentTensor(data, timestep_tag=eps_cond.timestep_tag)


def ddim_step(z_t: LatentTensor, eps: LatentTensor, t: int, t_prev: int, descriptor) -> LatentTensor:
    """Deterministic (eta = 0) update from timestep ``t`` down to ``t_prev``."""
    alpha_t = descriptor.alpha_bar(t)
    alpha_prev = descriptor.alpha_bar(t_prev)
    if not alpha_prev > alpha_t:
        raise ScheduleError(f"ddim_step requires t > t_prev on the noise ordering, got {t} -> {t_prev}")
    x0 = (z_t.data - np.sqrt(1.0 - alpha_t) * eps.data) / np.sqrt(alpha_t)
    data = np.sqrt(alpha_prev) * x0 + np.sqrt(1.0 - alpha_prev) * eps.data
    return LatentTensor(data, timestep_tag=t_prev)


def ddim_sample(
    z_start: LatentTensor,
    backend: Backend,
    timesteps,
    cond: PromptEmbedding,
    guidance_scale: float = 1.0,
    uncond: PromptEmbedding | None = None,
    hook=None,
    uncond_hook=None,
    progress=None,
    step_offset: int = 0,
) -> LatentTensor:
    """Plain denoising loop; with guidance 1 the unconditional pass is skipped."""
    timesteps = [int(t) for t in timesteps]
    z = z_start
    for k, t in enumerate(timesteps):
        t_prev = timesteps[k + 1] if k + 1 < len(timesteps) else -1
        eps_c, _ = backend.predict_noise(z, t, cond, hook=hook, step_index=step_offset + k)
        if guidance_scale != 1.0:
            if uncond is None:
                raise DimensionError("guidance above 1 needs an unconditional embedding")
            eps_u, _ = backend.predict_noise(z, t, uncond, hook=uncond_hook, step_index=step_offset + k)
            eps = classifier_free_guidance(eps_c, eps_u, guidance_scale)
        else:
            eps = eps_c
        z = ddim_step(z, eps, t, t_prev, backend.descriptor)
        if progress is not None:
            progress(k + 1, len(timesteps))
    return z


def reconstruct(trace: InversionTrace, backend: Backend) -> LatentTensor:
    """Null-prompt resampling of an inversion trace at guidance 1 (no controllers)."""
    null = backend.encode_text("")
    return ddim_sample(trace.initial_noise, backend, trace.timesteps[1:][::-1], null)


# ------------------------------------------------------------- controllers


@dataclass
class SiteRecord:
    """Instrumentation record handed to observers, one per controlled site visit."""

    step_index: int
    site: AttentionSite
    branch: str  # "cond" | "uncond"
    used_normal_mix: bool
    output: np.ndarray
    background: np.ndarray | None = None
    foreground: np.ndarray | None = None
    target_bits: np.ndarray | None = None


class _StepController:
    """Builds the attention hooks for one denoising step."""

    def __init__(
        self,
        step_index: int,
        schedule: EditSchedule,
        source_kv: dict[SiteId, tuple[np.ndarray, np.ndarray]],
        source_bits: dict[SiteId, np.ndarray],
        target_bits: dict[SiteId, np.ndarray],
        null_cross_kv: dict[SiteId, tuple[np.ndarray, np.ndarray]],
        aggregate: CrossAttentionAggregate,
        object_positions: np.ndarray,
        observer=None,
    ):
        self.step_index = step_index
        self.schedule = schedule
        self.source_kv = source_kv
        self.source_bits = source_bits
        self.target_bits = target_bits
        self.null_cross_kv = null_cross_kv
        self.aggregate = aggregate
        self.object_positions = object_positions
        self.observer = observer

    def hook(self, branch: str):
        def _hook(site: AttentionSite, head: int, q, k, v):
            if site.kind is SiteKind.SELF_ATTENTION:
                return self._self_site(site, head, q, k, v, branch)
            return self._cross_site(site, head, q, k, v, branch)

        return _hook

    def _self_site(self, site, head, q, k, v, branch):
        sid = (site.kind, site.layer_index)
        if should_use_normal_self_attention(site, self.schedule):
            if self.observer:
                self.observer(SiteRecord(self.step_index, site, branch, True, scaled_dot_attention(q, k, v)))
            return None  # plain self-attention of the current noise
        k_src, v_src = self.source_kv[sid]
        k_src, v_src = k_src[head], v_src[head]
        src_bits = self.source_bits[sid]
        tgt_bits = self.target_bits[sid]

        if self.schedule.background_from_source and not src_bits.all():
            background = preserve_background(q, k_src, v_src, src_bits)
        else:
            # no background tokens at this site's grid (or override disabled):
            # fall back to plain attention rather than an empty key set
            background = scaled_dot_attention(q, k, v)

        if tgt_bits.any():
            foreground = preserve_foreground(q, k, v, k_src, v_src, tgt_bits, site, self.schedule)
            out = compose_location(foreground, background, tgt_bits)
        else:
            foreground = None
            out = background
        if self.observer:
            self.observer(
                SiteRecord(
                    self.step_index, site, branch, False, out,
                    background=background, foreground=foreground, target_bits=tgt_bits,
                )
            )
        return out

    def _cross_site(self, site, head, q, k, v, branch):
        sid = (site.kind, site.layer_index)
        if branch == "uncond":
            # route everything to null text: identical to the default pass
            if sid not in self.null_cross_kv:
                self.null_cross_kv[sid] = (k.copy(), v.copy())
            return None
        tgt_bits = self.target_bits[sid]
        if sid not in self.null_cross_kv:
            raise CoverageError("null-text key/value features not captured yet")
        k_null, v_null = self.null_cross_kv[sid]
        if self.object_positions.size and self.aggregate is not None:
            probs = attention_probs(q, k)
            record_cross_attention(self.aggregate, site, probs, self.object_positions)
        out = localized_cross_attention(q, k, v, k_null, v_null, tgt_bits)
        if self.observer:
            self.observer(SiteRecord(self.step_index, site, branch, False, out, target_bits=tgt_bits))
        return out


# ---------------------------------------------------------------- edit loop


def _mix_seed(request_seed: int, schedule_seed: int) -> int:
    return (request_seed * 1_000_003 + schedule_seed) % (2**31 - 1)


def edit_image(
    request: EditRequest,
    backend: Backend,
    segmentation_client: SegmentationClient | None = None,
    trace: InversionTrace | None = None,
    progress=None,
    observer=None,
) -> EditResult:
    """Run one edit end to end; see the module docstring for the step anatomy."""
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    descriptor = backend.descriptor

    image = load_image(request.image)
    source_mask = resolve_mask(request.source_mask, segmentation_client, image=image)
    if source_mask.resolution != image.shape[:2]:
        raise InvalidMaskError(
            f"source mask resolution {source_mask.resolution} != image {image.shape[:2]}"
        )
    if source_mask.binary().all() and request.task is not TaskKind.ALTER_BACKGROUND:
        raise InvalidMaskError("source mask covers the whole image; no background to preserve")
    timings["resolve_mask_s"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    z0 = backend.encode_image(image)
    if trace is None:
        trace = ddim_invert(z0, backend, steps=request.steps)
    elif trace.steps != request.steps:
        raise ScheduleError(f"supplied trace has {trace.steps} steps, request wants {request.steps}")
    timings["inversion_s"] = time.perf_counter() - t1

    schedule = replace(request.schedule, rng_seed=_mix_seed(request.seed, request.schedule.rng_seed))
    cond = backend.encode_text(request.target_prompt, request.object_word or None)
    aggregate = CrossAttentionAggregate.empty(cond.n_tokens)

    self_ids = [d.site_id for d in descriptor.self_sites()]
    cross_ids = [d.site_id for d in descriptor.cross_sites()]
    grids = {d.site_id: d.token_grid for d in descriptor.sites}
    source_bits = {sid: resample_mask(source_mask, grids[sid]) for sid in self_ids}

    null = backend.encode_text("")
    null_cross_kv: dict[SiteId, tuple[np.ndarray, np.ndarray]] = {}

    timesteps = [int(t) for t in descriptor.inference_timesteps(request.steps)]
    z = trace.initial_noise
    mask_record: list[SpatialMask] = []
    forward_passes = 0
    t2 = time.perf_counter()
    for k, t in enumerate(timesteps):
        target_mask = target_mask_policy(
            request.task, source_mask, aggregate, request.mask_policy, k, schedule.mask_switch_step
        )
        mask_record.append(target_mask)
        target_bits = {sid: resample_mask(target_mask, grids[sid]) for sid in self_ids + cross_ids}

        source_latent = trace.latent_at(t)
        _, captures = backend.predict_noise(
            source_latent, t, null, capture=CaptureSpec(qkv=True), step_index=k
        )
        forward_passes += 1
        source_kv = {sid: (captures[sid].k, captures[sid].v) for sid in self_ids}

        controller = _StepController(
            k, schedule, source_kv, source_bits, target_bits,
            null_cross_kv, aggregate, cond.object_token_positions, observer,
        )
        uncond_hook = controller.hook("uncond") if request.controllers_enabled else None
        cond_hook = controller.hook("cond") if request.controllers_enabled else None
        try:
            eps_u, _ = backend.predict_noise(z, t, null, hook=uncond_hook, step_index=k)
            forward_passes += 1
            eps_c, _ = backend.predict_noise(z, t, cond, hook=cond_hook, step_index=k)
            forward_passes += 1
        except EmptyMaskError as exc:
            raise InvalidMaskError(f"step {k}, timestep {t}: {exc}") from exc
        eps = classifier_free_guidance(eps_c, eps_u, request.guidance_scale)
        t_prev = timesteps[k + 1] if k + 1 < len(timesteps) else -1
        z = ddim_step(z, eps, t, t_prev, descriptor)
        if progress is not None:
            progress(k + 1, len(timesteps))
    timings["denoise_s"] = time.perf_counter() - t2

    t3 = time.perf_counter()
    edited = backend.decode_latent(z)
    timings["decode_s"] = time.perf_counter() - t3
    timings["total_s"] = time.perf_counter() - t0

    echo = request.echo()
    fingerprint_payload = json.dumps(
        {"request": echo, "backend": descriptor.fingerprint(), "version": __version__},
        sort_keys=True,
    )
    return EditResult(
        image=edited,
        final_latent=z,
        target_mask_record=mask_record,
        timings=timings,
        fingerprint=hashlib.sha256(fingerprint_payload.encode()).hexdigest()[:20],
        request_echo=echo,
        backend_fingerprint=descriptor.fingerprint(),
        forward_passes=forward_passes,
    )


def write_run_manifest(result: EditResult, out_dir) -> Path:
    """Persist manifest.json plus per-step target-mask thumbnails."""
    out_dir = Path(out_dir)
    masks_dir = out_dir / "target_masks"
    masks_dir.mkdir(parents=True, exist_ok=True)
    for i, mask in enumerate(result.target_mask_record):
        mask.to_png(masks_dir / f"step_{i:03d}.png")
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(result.manifest(), indent=2, sort_keys=True))
    return manifest_path


# ------------------------------------------------------- multi-region synth


def partition_assignment(masks: list[SpatialMask], grid: tuple[int, int]) -> np.ndarray:
    """Token-to-region assignment by largest area coverage (ties: lowest index)."""
    fractions = np.stack([area_average_resample(m.values, grid).reshape(-1) for m in masks])
    return fractions.argmax(axis=0)


def text_to_image(
    prompt: str,
    backend: Backend,
    steps: int = 50,
    seed: int = 0,
    guidance_scale: float = 7.5,
    progress=None,
) -> np.ndarray:
    """Standard text-to-image sampling from seeded noise; the synthesis baseline."""
    descriptor = backend.descriptor
    rng = np.random.default_rng(seed)
    timesteps = [int(t) for t in descriptor.inference_timesteps(steps)]
    z = LatentTensor(rng.standard_normal((1, *descriptor.latent_shape)), timestep_tag=timesteps[0])
    cond = backend.encode_text(prompt)
    null = backend.encode_text("")
    z0 = ddim_sample(z, backend, timesteps, cond, guidance_scale, uncond=null, progress=progress)
    return backend.decode_latent(z0)


def multi_region_synthesis(
    prompts: list[tuple[str, SpatialMask]],
    backend: Backend,
    steps: int = 50,
    seed: int = 0,
    guidance_scale: float = 7.5,
    progress=None,
    observer=None,
) -> np.ndarray:
    """Pure generation where each region's cross-attention sees only its own prompt."""
    if not prompts:
        raise CoverageError("multi-region synthesis needs at least one prompt")
    descriptor = backend.descriptor
    masks = [m for _, m in prompts]
    union = np.zeros(masks[0].resolution, dtype=int)
    for m in masks:
        if m.resolution != masks[0].resolution:
            raise CoverageError("region masks disagree on resolution")
        union += m.binary().astype(int)
    if (union > 1).any():
        raise CoverageError("region masks overlap")
    if (union == 0).any():
        raise CoverageError("region masks leave uncovered pixels")

    embeddings = [backend.encode_text(text) for text, _ in prompts]
    null = backend.encode_text("")

    # prompt-side K/V per cross site: captured once per prompt (z-independent)
    probe = LatentTensor(np.zeros((1, *descriptor.latent_shape)))
    cross_ids = [d.site_id for d in descriptor.cross_sites()]
    prompt_kv: list[dict[SiteId, tuple[np.ndarray, np.ndarray]]] = []
    for emb in embeddings:
        _, caps = backend.predict_noise(probe, 0, emb, capture=CaptureSpec(qkv=True))
        prompt_kv.append({sid: (caps[sid].k, caps[sid].v) for sid in cross_ids})

    assignments = {
        d.site_id: partition_assignment(masks, d.token_grid) for d in descriptor.cross_sites()
    }

    def hook(site: AttentionSite, head: int, q, k, v):
        if site.kind is not SiteKind.CROSS_ATTENTION:
            return None
        sid = (site.kind, site.layer_index)
        owner = assignments[sid]
        parts = []
        for region, kv in enumerate(prompt_kv):
            positions = np.flatnonzero(owner == region)
            if positions.size == 0:
                continue
            k_r, v_r = kv[sid][0][head], kv[sid][1][head]
            parts.append((scaled_dot_attention(q[positions], k_r, v_r), positions))
        out = scatter(parts, site.n_tokens)
        if observer is not None:
            observer(site, out.copy())
        return out

    rng = np.random.default_rng(seed)
    timesteps = [int(t) for t in descriptor.inference_timesteps(steps)]
    z = LatentTensor(rng.standard_normal((1, *descriptor.latent_shape)), timestep_tag=timesteps[0])
    z0 = ddim_sample(
        z, backend, timesteps, embeddings[0], guidance_scale, uncond=null, hook=hook, progress=progress
    )
    return backend.decode_latent(z0)
