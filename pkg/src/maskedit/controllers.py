"""Attention controllers for mask-guided editing.

Two rewrite rules drive every edit. At self-attention sites the denoising
branch re-sources content from the inversion trace: background rows attend
only to background keys of the source features, foreground rows either attend
to object keys of the source features (once the step/layer gate opens and the
object is being retained) or run plain self-attention, and the two results
are composed row-wise under the target mask. At cross-attention sites the
spatial tokens are partitioned: rows inside the target mask attend to the
prompt, everything else attends to the null text, so the prompt cannot touch
regions it was never aimed at.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .attention import extract, masked_attention, scaled_dot_attention, scatter
from .errors import DimensionError
from .masks import REFERENCE_GRID, nearest_resample

logger = logging.getLogger(__name__)


class SiteKind(enum.Enum):
    SELF_ATTENTION = "self"
    CROSS_ATTENTION = "cross"


@dataclass(frozen=True)
class AttentionSite:
    """One attention layer visit: which step, which layer, what token grid.

    ``step_index`` counts completed denoising steps (0 at the first step);
    ``layer_index`` enumerates layers of the same kind in forward-pass order.
    """

    step_index: int
    layer_index: int
    kind: SiteKind
    token_grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.token_grid
        if h <= 0 or w <= 0:
            raise DimensionError("token grid must be positive")

    @property
    def n_tokens(self) -> int:
        return self.token_grid[0] * self.token_grid[1]


@dataclass(frozen=True)
class EditSchedule:
    """Gating and mixing knobs for one edit.

    The foreground-retention gate opens for sites with
    ``step_index > step_threshold and layer_index > layer_threshold``.
    ``normal_attention_fraction`` of self-attention sites (sampled per
    (step, layer) from ``rng_seed``) bypass the rewrite entirely to keep
    foreground/background interaction alive. ``mask_switch_step`` is the step
    at which replace/pose tasks stop trusting the source mask.
    """

    step_threshold: int = 3
    layer_threshold: int = 8
    normal_attention_fraction: float = 0.10
    mask_switch_step: int = 10
    rng_seed: int = 42
    retain_object: bool = True
    background_from_source: bool = True

    def __post_init__(self):
        if not 0.0 <= self.normal_attention_fraction <= 1.0:
            raise DimensionError("normal_attention_fraction must lie in [0, 1]")
        if self.rng_seed < 0:
            raise DimensionError("rng_seed must be non-negative")
        if self.mask_switch_step < 0:
            raise DimensionError("mask_switch_step must be >= 0")


def preserve_background(q, k_src, v_src, source_mask) -> np.ndarray:
    """Background content re-sourced from the inversion-trace features.

    Every query row attends only to keys outside the source (object) mask,
    so the output carries background semantics regardless of what the edit is
    doing to the object. Raises ``EmptyMaskError`` when the source mask covers
    everything (no background to preserve); the pipeline surfaces that as an
    invalid mask.
    """
    complement = 1 - np.asarray(source_mask)
    return masked_attention(q, k_src, v_src, complement)


def preserve_foreground(q, k, v, k_src, v_src, target_mask, site: AttentionSite, schedule: EditSchedule) -> np.ndarray:
    """Object content: source-feature attention once the gate opens, else plain.

    Early steps and shallow layers keep plain self-attention of the current
    noise so new shapes/poses can form; afterwards, if the object is being
    retained, queries attend to object keys of the source features.
    """
    gate_open = (
        schedule.retain_object
        and site.step_index > schedule.step_threshold
        and site.layer_index > schedule.layer_threshold
    )
    if gate_open:
        return masked_attention(q, k_src, v_src, target_mask)
    return scaled_dot_attention(q, k, v)


def compose_location(sc_fg, sc_bg, target_mask) -> np.ndarray:
    """Row-wise selection: foreground rows inside the target mask, background outside."""
    sc_fg = np.asarray(sc_fg)
    sc_bg = np.asarray(sc_bg)
    mask = np.asarray(target_mask)
    if sc_fg.shape != sc_bg.shape or mask.shape[0] != sc_fg.shape[0]:
        raise DimensionError(
            f"compose_location shapes disagree: fg {sc_fg.shape}, bg {sc_bg.shape}, mask {mask.shape}"
        )
    return np.where(mask[:, None] == 1, sc_fg, sc_bg)


def localized_cross_attention(q, k_prompt, v_prompt, k_null, v_null, target_mask) -> np.ndarray:
    """Partitioned cross-attention: masked rows see the prompt, the rest see null text.

    Either partition may be empty, in which case the output degrades to plain
    attention over the other conditioning.
    """
    q = np.asarray(q, dtype=np.float64)
    n_tokens = q.shape[0]
    fg_rows, fg_positions = extract(q, target_mask)
    bg_rows, bg_positions = extract(q, 1 - np.asarray(target_mask))
    parts = []
    if fg_rows.shape[0]:
        parts.append((scaled_dot_attention(fg_rows, k_prompt, v_prompt), fg_positions))
    if bg_rows.shape[0]:
        parts.append((scaled_dot_attention(bg_rows, k_null, v_null), bg_positions))
    return scatter(parts, n_tokens)


def should_use_normal_self_attention(site: AttentionSite, schedule: EditSchedule) -> bool:
    """Deterministic per-(step, layer) coin flip for the plain-attention mix."""
    if schedule.normal_attention_fraction <= 0.0:
        return False
    if schedule.normal_attention_fraction >= 1.0:
        return True
    seq = np.random.SeedSequence(
        entropy=schedule.rng_seed, spawn_key=(site.step_index, site.layer_index)
    )
    return float(np.random.default_rng(seq).random()) < schedule.normal_attention_fraction


@dataclass
class CrossAttentionAggregate:
    """Accumulated per-prompt-token attention mass on a fixed reference grid."""

    maps: np.ndarray
    sample_count: int = 0
    skipped_empty: int = 0

    @classmethod
    def empty(cls, n_prompt_tokens: int, grid: tuple[int, int] = REFERENCE_GRID) -> "CrossAttentionAggregate":
        return cls(maps=np.zeros((n_prompt_tokens, *grid)))

    @property
    def grid(self) -> tuple[int, int]:
        return self.maps.shape[1:]


def record_cross_attention(
    aggregate: CrossAttentionAggregate,
    site: AttentionSite,
    probs: np.ndarray,
    object_token_positions,
) -> CrossAttentionAggregate:
    """Accumulate the attention mass each spatial token puts on the object tokens.

    ``probs`` is the (spatial tokens x prompt tokens) attention-weight matrix
    of one cross-attention visit; each object token's column is reshaped to
    the site grid, resampled to the reference grid, and added to that token's
    accumulated map.
    """
    if site.kind is not SiteKind.CROSS_ATTENTION:
        raise DimensionError("cross-attention recording at a non-cross site")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != site.n_tokens:
        raise DimensionError(
            f"probs shape {probs.shape} does not match site grid {site.token_grid}"
        )
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise DimensionError("attention-weight rows must sum to 1")
    positions = np.asarray(object_token_positions, dtype=np.intp).reshape(-1)
    if positions.size == 0:
        aggregate.skipped_empty += 1
        logger.warning("cross-attention recording skipped: no object token positions")
        return aggregate
    if positions.max() >= aggregate.maps.shape[0]:
        raise DimensionError("object token position outside the aggregate's token axis")
    for p in positions:
        column = probs[:, p].reshape(site.token_grid)
        aggregate.maps[p] += nearest_resample(column, aggregate.grid)
    aggregate.sample_count += 1
    return aggregate
