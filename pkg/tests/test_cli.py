import json
from pathlib import Path

import numpy as np
import pytest

from maskedit.cli import main, parse_clicks
from maskedit.evaluation import micro_subset_path
from maskedit.errors import MaskEditError
from maskedit.images import save_image

MICRO_ROOT = micro_subset_path()


@pytest.fixture()
def edit_inputs(tmp_path, test_image, blob_source_mask):
    image_path = tmp_path / "input.png"
    mask_path = tmp_path / "mask.png"
    save_image(test_image, image_path)
    blob_source_mask.to_png(mask_path)
    return str(image_path), str(mask_path)


def canonical_manifest(path: Path) -> str:
    payload = json.loads(path.read_text())
    payload.pop("timing")
    return json.dumps(payload, sort_keys=True)


class TestParseClicks:
    def test_basic(self):
        assert parse_clicks("3,4;5,6,-") == [(3, 4, True), (5, 6, False)]

    def test_bad_polarity(self):
        with pytest.raises(MaskEditError):
            parse_clicks("3,4,x")

    def test_empty(self):
        with pytest.raises(MaskEditError):
            parse_clicks(" ; ")


class TestEditCommand:
    def test_remove_task_writes_outputs_with_zero_masks(self, edit_inputs, tmp_path):
        image_path, mask_path = edit_inputs
        out = tmp_path / "out"
        code = main([
            "edit", "--image", image_path, "--mask", mask_path,
            "--task", "remove", "--steps", "10", "--out", str(out),
        ])
        assert code == 0
        assert (out / "edited.png").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["request"]["task"] == "remove"
        masks = sorted((out / "target_masks").glob("*.png"))
        assert len(masks) == 10
        from maskedit.masks import SpatialMask

        assert all(not SpatialMask.from_png(p).binary().any() for p in masks)

    def test_missing_prompt_for_replace_exits_2(self, edit_inputs, tmp_path, capsys):
        image_path, mask_path = edit_inputs
        code = main([
            "edit", "--image", image_path, "--mask", mask_path,
            "--task", "replace", "--steps", "10", "--out", str(tmp_path / "o"),
        ])
        assert code == 2
        assert "--prompt" in capsys.readouterr().err

    def test_missing_required_flag_exits_2(self, edit_inputs, tmp_path):
        image_path, _ = edit_inputs
        code = main(["edit", "--image", image_path, "--task", "remove", "--out", str(tmp_path)])
        assert code == 2

    def test_unreadable_image_exits_3(self, edit_inputs, tmp_path):
        _, mask_path = edit_inputs
        code = main([
            "edit", "--image", str(tmp_path / "missing.png"), "--mask", mask_path,
            "--task", "remove", "--steps", "10", "--out", str(tmp_path / "o"),
        ])
        assert code == 3

    def test_deterministic_outputs_excluding_timestamps(self, edit_inputs, tmp_path):
        image_path, mask_path = edit_inputs
        outs = []
        for name in ("run1", "run2"):
            out = tmp_path / name
            code = main([
                "edit", "--image", image_path, "--mask", mask_path,
                "--task", "replace", "--prompt", "a glass marble", "--object-word", "marble",
                "--steps", "10", "--seed", "7", "--out", str(out),
            ])
            assert code == 0
            outs.append(out)
        a, b = outs
        assert (a / "edited.png").read_bytes() == (b / "edited.png").read_bytes()
        assert canonical_manifest(a / "manifest.json") == canonical_manifest(b / "manifest.json")
        for mask_a, mask_b in zip(sorted((a / "target_masks").glob("*")), sorted((b / "target_masks").glob("*"))):
            assert mask_a.read_bytes() == mask_b.read_bytes()

    def test_clicks_with_stub_segmentation(self, edit_inputs, tmp_path):
        image_path, _ = edit_inputs
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"segmentation_endpoint": "stub"}))
        out = tmp_path / "out"
        code = main([
            "edit", "--image", image_path, "--clicks", "8,8,+",
            "--task", "remove", "--steps", "10", "--out", str(out), "--config", str(config),
        ])
        assert code == 0
        assert (out / "edited.png").exists()

    def test_clicks_without_endpoint_exits_2(self, edit_inputs, tmp_path):
        image_path, _ = edit_inputs
        code = main([
            "edit", "--image", image_path, "--clicks", "8,8",
            "--task", "remove", "--steps", "10", "--out", str(tmp_path / "o"),
        ])
        assert code == 2


class TestBenchCommand:
    def test_micro_subset_produces_six_records(self, tmp_path):
        report = tmp_path / "report.txt"
        code = main([
            "bench", "--dataset", str(MICRO_ROOT), "--backend", "toy",
            "--steps", "10", "--report", str(report),
        ])
        assert code == 0
        from maskedit.evaluation import load_records_csv

        records = load_records_csv(report.with_suffix(".csv"))
        assert len(records) == 6
        assert report.read_text().startswith("editing benchmark report")

    def test_limit_zero_exits_2(self, tmp_path):
        code = main([
            "bench", "--dataset", str(MICRO_ROOT), "--limit", "0",
            "--report", str(tmp_path / "r.txt"),
        ])
        assert code == 2

    def test_bad_dataset_exits_2(self, tmp_path):
        code = main(["bench", "--dataset", str(tmp_path), "--report", str(tmp_path / "r.txt")])
        assert code == 2

    def test_interrupted_run_resumes_without_duplicates(self, tmp_path, monkeypatch):
        report = tmp_path / "report.txt"
        checkpoint = report.with_suffix(".checkpoint.jsonl")

        import maskedit.evaluation as evaluation

        real_clip = evaluation.clip_score
        calls = {"n": 0}

        def flaky_clip(image, prompt, encoder):
            calls["n"] += 1
            if calls["n"] == 4:
                raise evaluation.MetricError("simulated crash")
            return real_clip(image, prompt, encoder)

        monkeypatch.setattr("maskedit.evaluation.clip_score", flaky_clip)
        code = main([
            "bench", "--dataset", str(MICRO_ROOT), "--backend", "toy",
            "--steps", "10", "--report", str(report),
        ])
        assert code == 3
        completed = [json.loads(l)["sample_id"] for l in checkpoint.read_text().splitlines() if l.strip()]
        assert len(completed) == 3

        monkeypatch.setattr("maskedit.evaluation.clip_score", real_clip)
        code = main([
            "bench", "--dataset", str(MICRO_ROOT), "--backend", "toy",
            "--steps", "10", "--report", str(report),
        ])
        assert code == 0
        from maskedit.evaluation import load_records_csv

        records = load_records_csv(report.with_suffix(".csv"))
        assert len(records) == 6
        ids = [r.sample_id for r in records]
        assert len(ids) == len(set(ids))
        lines = [json.loads(l)["sample_id"] for l in checkpoint.read_text().splitlines() if l.strip()]
        assert len(lines) == len(set(lines)) == 6
