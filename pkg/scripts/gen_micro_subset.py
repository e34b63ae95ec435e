#!/usr/bin/env python3
"""Regenerate the shipped 6-sample micro benchmark subset.

Deterministic 16x16 scenes with simple geometric objects; masks match the
object footprints. Run from the repo root:

    python3 scripts/gen_micro_subset.py
"""

import json
from pathlib import Path

import numpy as np
from PIL import Image

ROOT = Path(__file__).resolve().parents[1] / "src" / "maskedit" / "data" / "imba_micro"


def scene(seed, bg_color, obj_color, center, radius, square=False):
    rng = np.random.default_rng(seed)
    img = np.tile(np.asarray(bg_color, dtype=float), (16, 16, 1))
    img += rng.normal(0, 0.03, size=img.shape)
    rr, cc = np.mgrid[0:16, 0:16]
    if square:
        mask = (np.abs(rr - center[0]) <= radius) & (np.abs(cc - center[1]) <= radius)
    else:
        mask = (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius**2
    img[mask] = obj_color
    return np.clip(img, 0, 1), mask


SAMPLES = [
    dict(id="ball-to-cube", task="replace", retain=True, prompt="a wooden cube on the table",
         object_word="cube", seed=1, bg=(0.7, 0.65, 0.55), obj=(0.85, 0.2, 0.2), center=(8, 8), radius=3),
    dict(id="bird-pose", task="pose", retain=True, prompt="a small bird facing left",
         object_word="bird", seed=2, bg=(0.55, 0.7, 0.85), obj=(0.3, 0.3, 0.35), center=(7, 9), radius=3),
    dict(id="meadow-background", task="background", retain=False, prompt="a snowy field at dusk",
         object_word="field", seed=3, bg=(0.35, 0.6, 0.3), obj=(0.9, 0.85, 0.3), center=(8, 7), radius=3),
    dict(id="remove-crate", task="remove", retain=False, prompt="",
         object_word="", seed=4, bg=(0.6, 0.6, 0.62), obj=(0.45, 0.3, 0.2), center=(9, 6), radius=2, square=True),
    dict(id="add-hat-region", task="region", retain=False, prompt="a tiny red hat",
         object_word="hat", seed=5, bg=(0.75, 0.7, 0.6), obj=(0.2, 0.45, 0.7), center=(5, 8), radius=2),
    dict(id="fruit-swap", task="replace", retain=False, prompt="a green apple in the bowl",
         object_word="apple", seed=6, bg=(0.5, 0.4, 0.35), obj=(0.95, 0.55, 0.15), center=(10, 10), radius=3),
]


def main():
    (ROOT / "images").mkdir(parents=True, exist_ok=True)
    (ROOT / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in SAMPLES:
        img, mask = scene(s["seed"], s["bg"], s["obj"], s["center"], s["radius"], s.get("square", False))
        if s["task"] == "background":
            mask = ~mask  # the editable region is the background
        Image.fromarray((img * 255 + 0.5).astype(np.uint8), "RGB").save(ROOT / "images" / f"{s['id']}.png")
        Image.fromarray(mask.astype(np.uint8) * 255, "L").save(ROOT / "masks" / f"{s['id']}.png")
        entries.append(
            {
                "id": s["id"],
                "image": f"images/{s['id']}.png",
                "mask": f"masks/{s['id']}.png",
                "target_prompt": s["prompt"],
                "object_word": s["object_word"],
                "task": s["task"],
                "retain_object": s["retain"],
            }
        )
    counts = {
        "total": len(entries),
        "retention": sum(1 for s in SAMPLES if s["retain"]),
        "modification": sum(1 for s in SAMPLES if s["task"] != "background"),
        "background": sum(1 for s in SAMPLES if s["task"] == "background"),
    }
    manifest = {"name": "imba-micro", "counts": counts, "samples": entries}
    (ROOT / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(entries)} samples to {ROOT}")


if __name__ == "__main__":
    main()
