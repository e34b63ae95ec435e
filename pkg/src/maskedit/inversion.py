"""Deterministic DDIM inversion under null-text conditioning.

Inversion walks the clean latent up the noise schedule with guidance scale 1
and the empty-prompt embedding, recording every intermediate latent. During
an edit, the per-step source features (self-attention K/V of the trace latent
at the matching timestep) are recomputed by replaying one forward pass, which
keeps memory flat instead of caching every site for every step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backend.base import Backend, CaptureSpec, LatentTensor, SiteId
from .controllers import SiteKind
from .errors import InstrumentationError, InversionError, ScheduleError


@dataclass(frozen=True)
class InversionTrace:
    """Latent trajectory from the clean latent (tag -1) up to full noise."""

    latents: tuple[LatentTensor, ...]
    timesteps: tuple[int, ...]
    steps: int

    def __post_init__(self):
        if len(self.latents) != self.steps + 1 or len(self.timesteps) != self.steps + 1:
            raise ScheduleError("trace must hold steps + 1 latents and timesteps")
        if not all(a < b for a, b in zip(self.timesteps, self.timesteps[1:])):
            raise ScheduleError("trace timesteps must be strictly increasing")
        for latent, tag in zip(self.latents, self.timesteps):
            if latent.timestep_tag != tag:
                raise ScheduleError("latent tag disagrees with trace timesteps")

    @property
    def initial_noise(self) -> LatentTensor:
        return self.latents[-1]

    def latent_at(self, timestep: int) -> LatentTensor:
        try:
            index = self.timesteps.index(timestep)
        except ValueError:
            raise ScheduleError(f"trace holds no latent for timestep {timestep}") from None
        return self.latents[index]


def invert_step(z: np.ndarray, eps: np.ndarray, alpha_from: float, alpha_to: float) -> np.ndarray:
    """One deterministic step up the schedule (the sampling update run backward)."""
    x0 = (z - np.sqrt(1.0 - alpha_from) * eps) / np.sqrt(alpha_from)
    return np.sqrt(alpha_to) * x0 + np.sqrt(1.0 - alpha_to) * eps


def ddim_invert(z0: LatentTensor, backend: Backend, steps: int = 50) -> InversionTrace:
    """Invert a clean latent to the noise latent whose resampling reconstructs it.

    Runs at guidance scale 1 with the null-text embedding: the noise estimate
    is taken as-is, with no classifier-free extrapolation, which is the only
    setting under which the deterministic round trip is faithful.
    """
    null = backend.encode_text("")
    grid = backend.descriptor.inference_timesteps(steps)
    ascending = [int(t) for t in grid[::-1]]

    current = z0.with_tag(-1) if z0.timestep_tag != -1 else z0
    latents = [current]
    tags = [-1]
    for i, t in enumerate(ascending):
        eps, _ = backend.predict_noise(current, t, null)
        if not np.isfinite(eps.data).all():
            raise InversionError(f"non-finite noise prediction at timestep {t}", step_index=i)
        data = invert_step(
            current.data,
            eps.data,
            alpha_from=backend.descriptor.alpha_bar(tags[-1]),
            alpha_to=backend.descriptor.alpha_bar(t),
        )
        if not np.isfinite(data).all():
            raise InversionError(f"non-finite latent while inverting to timestep {t}", step_index=i)
        current = LatentTensor(data, timestep_tag=t)
        latents.append(current)
        tags.append(t)
    return InversionTrace(latents=tuple(latents), timesteps=tuple(tags), steps=steps)


def source_features(trace: InversionTrace, t_index: int, backend: Backend) -> dict[SiteId, tuple[np.ndarray, np.ndarray]]:
    """Self-attention K/V of the trace latent at ``t_index``, per site.

    One extra forward pass under null conditioning; deterministic for fixed
    inputs, and the trace itself is never touched.
    """
    if not 0 <= t_index < len(trace.latents):
        raise ScheduleError(f"t_index {t_index} outside trace of {len(trace.latents)} latents")
    z = trace.latents[t_index]
    null = backend.encode_text("")
    _, captures = backend.predict_noise(z, z.timestep_tag, null, capture=CaptureSpec(qkv=True))
    features: dict[SiteId, tuple[np.ndarray, np.ndarray]] = {}
    for decl in backend.descriptor.self_sites():
        cap = captures.get(decl.site_id)
        if cap is None or cap.k is None or cap.v is None:
            raise InstrumentationError(
                f"self-attention layer {decl.layer_index} was not captured"
            )
        features[decl.site_id] = (cap.k, cap.v)
    return features


# ------------------------------------------------------------- persistence

_MANIFEST = "trace.json"


def save_trace(trace: InversionTrace, directory, backend: Backend) -> None:
    """Persist one array file per step plus a manifest, for re-edit without re-inversion."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, latent in enumerate(trace.latents):
        np.save(directory / f"latent_{i:04d}.npy", latent.data)
    manifest = {
        "steps": trace.steps,
        "timesteps": list(trace.timesteps),
        "backend_fingerprint": backend.descriptor.fingerprint(),
    }
    (directory / _MANIFEST).write_text(json.dumps(manifest, indent=2))


def load_trace(directory, backend: Backend) -> InversionTrace:
    directory = Path(directory)
    manifest_path = directory / _MANIFEST
    if not manifest_path.exists():
        raise InversionError(f"no trace manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest["backend_fingerprint"] != backend.descriptor.fingerprint():
        raise InversionError("trace was produced by a different backend configuration")
    latents = []
    for i, tag in enumerate(manifest["timesteps"]):
        data = np.load(directory / f"latent_{i:04d}.npy")
        latents.append(LatentTensor(data, timestep_tag=int(tag)))
    return InversionTrace(
        latents=tuple(latents),
        timesteps=tuple(int(t) for t in manifest["timesteps"]),
        steps=int(manifest["steps"]),
    )
