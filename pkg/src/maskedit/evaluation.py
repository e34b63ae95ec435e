"""Benchmark loading, CLIPScore / background-perceptual metrics, and reports.

Metric backends are pluggable clients: anything with ``embed_image`` /
``embed_text`` works as the image-text encoder, anything with ``distance``
as the perceptual metric. Deterministic stand-ins are provided so the whole
harness runs on CPU with no downloaded weights; real encoders drop in behind
the same protocols.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import DatasetError, MetricError, ReportError
from .images import load_image, to_uint8
from .masks import SpatialMask, TaskKind, dilate

# Published comparison row rendered alongside measured means (for context
# only; desk-scale subsets are not comparable to the full benchmark run).
PUBLISHED_REFERENCE = {"clip_score": 29.26, "lpips_background": 0.149}

FULL_SET_COUNTS = {"total": 104, "retention": 43, "modification": 97, "background": 7}


def micro_subset_path() -> Path:
    """Directory of the shipped 6-sample micro benchmark subset."""
    return Path(__file__).resolve().parent / "data" / "imba_micro"


@dataclass(frozen=True)
class ImbaSample:
    sample_id: str
    image_path: Path
    target_prompt: str
    source_mask_path: Path
    task: TaskKind
    retain_object: bool
    object_word: str = ""
    notes: str = ""

    def __post_init__(self):
        if self.task is TaskKind.REMOVE_OBJECT and self.retain_object:
            raise DatasetError(f"{self.sample_id}: removal samples cannot require retention")


@dataclass(frozen=True)
class ImbaDataset:
    name: str
    samples: tuple[ImbaSample, ...]
    partial: bool

    def __len__(self) -> int:
        return len(self.samples)


def _category_counts(samples) -> dict:
    return {
        "total": len(samples),
        "retention": sum(1 for s in samples if s.retain_object),
        "modification": sum(1 for s in samples if s.task is not TaskKind.ALTER_BACKGROUND),
        "background": sum(1 for s in samples if s.task is TaskKind.ALTER_BACKGROUND),
    }


def load_imba(root_dir) -> ImbaDataset:
    """Load and validate a benchmark directory (manifest.json + images/ + masks/)."""
    root = Path(root_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest: {exc}") from exc

    samples = []
    offenders = []
    for entry in manifest.get("samples", []):
        image_path = root / entry["image"]
        mask_path = root / entry["mask"]
        if not image_path.exists():
            offenders.append(str(image_path))
        if not mask_path.exists():
            offenders.append(str(mask_path))
        samples.append(
            ImbaSample(
                sample_id=str(entry["id"]),
                image_path=image_path,
                target_prompt=entry["target_prompt"],
                source_mask_path=mask_path,
                task=TaskKind.parse(entry["task"]),
                retain_object=bool(entry["retain_object"]),
                object_word=entry.get("object_word", ""),
                notes=entry.get("notes", ""),
            )
        )
    if offenders:
        raise DatasetError("missing files: " + ", ".join(offenders))
    if len({s.sample_id for s in samples}) != len(samples):
        raise DatasetError("duplicate sample ids in manifest")

    actual = _category_counts(samples)
    declared = manifest.get("counts", {})
    for key, value in declared.items():
        if key in actual and actual[key] != value:
            raise DatasetError(
                f"manifest declares {key}={value} but the sample list yields {actual[key]}"
            )
    if actual["total"] == FULL_SET_COUNTS["total"] and actual != FULL_SET_COUNTS:
        raise DatasetError(f"a {FULL_SET_COUNTS['total']}-sample set must match {FULL_SET_COUNTS}, got {actual}")
    partial = actual["total"] < FULL_SET_COUNTS["total"]
    return ImbaDataset(name=manifest.get("name", root.name), samples=tuple(samples), partial=partial)


# ------------------------------------------------------------------ metrics


class ImageTextEncoder(Protocol):
    def embed_image(self, image) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


class PerceptualMetric(Protocol):
    def distance(self, a: np.ndarray, b: np.ndarray) -> float: ...


def clip_score(image, prompt: str, encoder_client: ImageTextEncoder) -> float:
    """100 * max(0, cosine similarity) of the image and text embeddings."""
    try:
        image_vec = np.asarray(encoder_client.embed_image(load_image(image)), dtype=np.float64)
        text_vec = np.asarray(encoder_client.embed_text(prompt), dtype=np.float64)
    except Exception as exc:
        raise MetricError(f"encoder client failed: {exc}") from exc
    denom = np.linalg.norm(image_vec) * np.linalg.norm(text_vec)
    if denom == 0:
        raise MetricError("encoder produced a zero embedding")
    cosine = float(np.dot(image_vec, text_vec) / denom)
    return 100.0 * max(0.0, cosine)


def background_lpips(
    original,
    edited,
    source_mask: SpatialMask,
    metric_client: PerceptualMetric,
    mask_dilation_px: int = 8,
) -> float:
    """Perceptual distance with the (dilated) object region zeroed in both images."""
    a = load_image(original)
    b = load_image(edited)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    if source_mask.resolution != a.shape[:2]:
        raise MetricError("source mask resolution does not match the images")
    region = dilate(source_mask, mask_dilation_px).binary()
    a = a.copy()
    b = b.copy()
    a[region] = 0.0
    b[region] = 0.0
    try:
        return float(metric_client.distance(a, b))
    except MetricError:
        raise
    except Exception as exc:
        raise MetricError(f"perceptual metric failed: {exc}") from exc


# ----------------------------------------------------------- stock clients


class HashingEncoderStub:
    """Deterministic encoder stand-in: unit vectors seeded from content hashes.

    Scores carry no semantic meaning; useful for harness tests and dry runs.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim

    def _vec(self, payload: bytes) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")
        v = np.random.default_rng(seed).normal(size=self.dim)
        return v / np.linalg.norm(v)

    def embed_image(self, image) -> np.ndarray:
        return self._vec(to_uint8(load_image(image)).tobytes())

    def embed_text(self, text: str) -> np.ndarray:
        return self._vec(text.encode())


class PyramidL2Metric:
    """Deterministic perceptual stand-in: RMS difference over a blur pyramid."""

    def __init__(self, levels: int = 3):
        self.levels = levels

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        total = 0.0
        for _ in range(self.levels):
            total += float(np.sqrt(np.mean((a - b) ** 2)))
            if min(a.shape[0], a.shape[1]) < 2:
                break
            a = _halve(a)
            b = _halve(b)
        return total / self.levels


def _halve(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


class SentenceTransformerEncoder:
    """CLIP-style encoder backed by sentence-transformers; needs local weights."""

    def __init__(self, model_name: str = "clip-ViT-B-32"):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise MetricError("sentence-transformers is not installed") from exc
        self._model = SentenceTransformer(model_name)

    def embed_image(self, image) -> np.ndarray:  # pragma: no cover - needs weights
        from PIL import Image as PILImage

        return np.asarray(self._model.encode(PILImage.fromarray(to_uint8(load_image(image)))))

    def embed_text(self, text: str) -> np.ndarray:  # pragma: no cover - needs weights
        return np.asarray(self._model.encode(text))


# ------------------------------------------------------------------ records


@dataclass(frozen=True)
class MetricRecord:
    sample_id: str
    clip_score: float
    lpips_background: float
    wall_time_s: float

    def __post_init__(self):
        if self.lpips_background < 0:
            raise MetricError("lpips_background must be >= 0")


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "clip_score", "lpips_background", "wall_time_s"])
        for r in records:
            writer.writerow([r.sample_id, repr(r.clip_score), repr(r.lpips_background), repr(r.wall_time_s)])


def load_records_csv(path) -> list[MetricRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                MetricRecord(
                    sample_id=row["sample_id"],
                    clip_score=float(row["clip_score"]),
                    lpips_background=float(row["lpips_background"]),
                    wall_time_s=float(row["wall_time_s"]),
                )
            )
    return records


def report(records, out_path) -> dict:
    """Write a plain-text summary and a per-sample CSV; returns the summary dict."""
    records = list(records)
    if not records:
        raise ReportError("no metric records to report")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    summary = {
        "samples": len(records),
        "mean_clip_score": float(np.mean([r.clip_score for r in records])),
        "mean_lpips_background": float(np.mean([r.lpips_background for r in records])),
        "total_wall_time_s": float(np.sum([r.wall_time_s for r in records])),
    }
    csv_path = out_path.with_suffix(".csv")
    write_records_csv(records, csv_path)
    lines = [
        "editing benchmark report",
        "========================",
        f"samples:                {summary['samples']}",
        f"mean CLIPScore:         {summary['mean_clip_score']:.4f}",
        f"mean LPIPS (background):{summary['mean_lpips_background']:.4f}",
        f"total wall time:        {summary['total_wall_time_s']:.2f}s",
        "",
        "published full-benchmark values (for reference only, not measured here):",
        f"  CLIPScore {PUBLISHED_REFERENCE['clip_score']:.2f} / LPIPS (background) {PUBLISHED_REFERENCE['lpips_background']:.3f}",
        f"per-sample records: {csv_path.name}",
    ]
    out_path.write_text("\n".join(lines) + "\n")
    return summary


# ------------------------------------------------------------ bench driver


def run_benchmark(
    dataset: ImbaDataset,
    backend,
    encoder_client: ImageTextEncoder,
    metric_client: PerceptualMetric,
    steps: int = 50,
    limit: int | None = None,
    checkpoint_path=None,
    progress=None,
) -> list[MetricRecord]:
    """Edit every sample and score it; per-sample checkpoints make runs resumable.

    Completed sample ids found in the checkpoint file are skipped, so an
    interrupted run continues without duplicating records.
    """
    from .mask_input import MaskSpec
    from .pipeline import EditRequest, edit_image

    done: dict[str, MetricRecord] = {}
    checkpoint = Path(checkpoint_path) if checkpoint_path else None
    if checkpoint:
        checkpoint.parent.mkdir(parents=True, exist_ok=True)
    if checkpoint and checkpoint.exists():
        for line in checkpoint.read_text().splitlines():
            if not line.strip():
                continue
            payload = json.loads(line)
            done[payload["sample_id"]] = MetricRecord(**payload)

    samples = dataset.samples[: limit if limit is not None else len(dataset.samples)]
    records: list[MetricRecord] = []
    for i, sample in enumerate(samples):
        if sample.sample_id in done:
            records.append(done[sample.sample_id])
            continue
        started = time.perf_counter()
        request = EditRequest(
            image=str(sample.image_path),
            source_mask=MaskSpec.from_file(sample.source_mask_path),
            target_prompt=sample.target_prompt,
            object_word=sample.object_word,
            task=sample.task,
            steps=steps,
        )
        result = edit_image(request, backend)
        original = load_image(str(sample.image_path))
        mask = SpatialMask.from_png(sample.source_mask_path)
        record = MetricRecord(
            sample_id=sample.sample_id,
            clip_score=clip_score(result.image, sample.target_prompt, encoder_client),
            lpips_background=background_lpips(original, result.image, mask, metric_client),
            wall_time_s=time.perf_counter() - started,
        )
        records.append(record)
        if checkpoint:
            with open(checkpoint, "a") as fh:
                fh.write(json.dumps(record.__dict__) + "\n")
        if progress:
            progress(i + 1, len(samples))
    return records
