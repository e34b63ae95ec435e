"""Config file loading and backend/client construction shared by the CLI and service.

Config is a flat JSON object; every key has a default and flags override the
file. Documented keys: ``backend`` ("toy", "toy:<seed>", or "sd"), ``device``,
``precision``, ``weights_path``, ``queue_size``, ``max_concurrent_jobs``,
``store_path``, ``segmentation_endpoint`` ("stub" for the in-process stub).
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import MaskEditError
from .mask_input import SegmentationClient, stub_client

DEFAULTS = {
    "backend": "toy",
    "device": "cpu",
    "precision": "fp32",
    "weights_path": None,
    "queue_size": 16,
    "max_concurrent_jobs": 1,
    "store_path": "maskedit-store",
    "segmentation_endpoint": None,
}


def load_config(path=None) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        payload = json.loads(Path(path).read_text())
        unknown = set(payload) - set(DEFAULTS)
        if unknown:
            raise MaskEditError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(payload)
    return cfg


def build_backend(cfg: dict):
    name = cfg.get("backend", "toy")
    if name == "toy" or name.startswith("toy:"):
        from .backend import ToyBackend

        seed = int(name.split(":", 1)[1]) if ":" in name else 0
        return ToyBackend(seed=seed)
    if name == "sd":
        from .backend.sd import StableDiffusionBackend

        return StableDiffusionBackend(
            weights_path=cfg.get("weights_path"),
            device=cfg.get("device", "cpu"),
            precision=cfg.get("precision", "fp32"),
        )
    raise MaskEditError(f"unknown backend {name!r}; use 'toy', 'toy:<seed>', or 'sd'")


def build_segmentation_client(cfg: dict) -> SegmentationClient | None:
    endpoint = cfg.get("segmentation_endpoint")
    if endpoint is None:
        return None
    if endpoint == "stub":
        return stub_client()
    return SegmentationClient(base_url=endpoint)
