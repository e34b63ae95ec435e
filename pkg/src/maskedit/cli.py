"""Batch command-line interface: single edits, benchmark runs, and the service.

Exit codes: 0 success, 2 validation/usage error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import build_backend, build_segmentation_client, load_config
from .errors import MaskEditError, ReportError
from .images import save_image
from .mask_input import MaskSpec
from .masks import TaskKind
from .pipeline import EditRequest, edit_image, write_run_manifest

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PIPELINE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskedit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    edit = sub.add_parser("edit", help="edit one image")
    edit.add_argument("--image", required=True, help="input image path")
    group = edit.add_mutually_exclusive_group(required=True)
    group.add_argument("--mask", help="source mask PNG (nonzero = edit region)")
    group.add_argument("--clicks", help="click spec 'x,y[,+|-];x,y[,+|-];...'")
    group.add_argument("--mask-text", help="text phrase for promptable segmentation")
    edit.add_argument("--prompt", default="", help="target prompt")
    edit.add_argument("--task", required=True, choices=[t.value for t in TaskKind])
    edit.add_argument("--object-word", default="", help="object word inside the prompt")
    edit.add_argument("--guidance", type=float, default=7.5)
    edit.add_argument("--steps", type=int, default=50)
    edit.add_argument("--seed", type=int, default=0)
    edit.add_argument("--out", required=True, help="output directory")
    edit.add_argument("--config", help="JSON config file")
    edit.add_argument("--no-controllers", action="store_true", help="ablation: vanilla resampling")

    bench = sub.add_parser("bench", help="run the editing benchmark")
    bench.add_argument("--dataset", required=True, help="benchmark directory")
    bench.add_argument("--backend", default=None, help="override config backend (toy, toy:<seed>, sd)")
    bench.add_argument("--limit", type=int, default=None, help="evaluate at most N samples")
    bench.add_argument("--report", required=True, help="report output path (.txt; .csv written next to it)")
    bench.add_argument("--steps", type=int, default=50)
    bench.add_argument("--config", help="JSON config file")

    serve = sub.add_parser("serve", help="run the HTTP job service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8585)
    serve.add_argument("--config", help="JSON config file")
    return parser


def parse_clicks(text: str) -> list[tuple[int, int, bool]]:
    clicks = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [p.strip() for p in chunk.split(",")]
        if len(parts) not in (2, 3):
            raise MaskEditError(f"bad click {chunk!r}; expected 'x,y' or 'x,y,+/-'")
        positive = True
        if len(parts) == 3:
            if parts[2] not in ("+", "-"):
                raise MaskEditError(f"bad click polarity {parts[2]!r}; use + or -")
            positive = parts[2] == "+"
        clicks.append((int(parts[0]), int(parts[1]), positive))
    if not clicks:
        raise MaskEditError("no clicks parsed")
    return clicks


def _mask_spec(args) -> MaskSpec:
    if args.mask:
        return MaskSpec.from_file(args.mask)
    if args.clicks:
        return MaskSpec.from_clicks(parse_clicks(args.clicks))
    return MaskSpec.from_phrase(args.mask_text)


def cmd_edit(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.task != TaskKind.REMOVE_OBJECT.value and not args.prompt.strip():
            if args.task != TaskKind.MODIFY_REGION.value or args.prompt != "":
                print(f"error: --prompt is required for --task {args.task}", file=sys.stderr)
                return EXIT_USAGE
        request = EditRequest(
            image=args.image,
            source_mask=_mask_spec(args),
            target_prompt=args.prompt,
            object_word=args.object_word,
            task=TaskKind.parse(args.task),
            guidance_scale=args.guidance,
            steps=args.steps,
            seed=args.seed,
            controllers_enabled=not args.no_controllers,
        )
    except MaskEditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        backend = build_backend(cfg)
        client = build_segmentation_client(cfg)
        if client is None and request.source_mask.kind != "file":
            print("error: --clicks/--mask-text need segmentation_endpoint in --config", file=sys.stderr)
            return EXIT_USAGE
        result = edit_image(request, backend, segmentation_client=client)
    except (MaskEditError, OSError, ValueError) as exc:
        print(f"edit failed: {exc}", file=sys.stderr)
        return EXIT_PIPELINE

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_image(result.image, out_dir / "edited.png")
    manifest_path = write_run_manifest(result, out_dir)
    print(f"edited image: {out_dir / 'edited.png'}")
    print(f"run manifest: {manifest_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .evaluation import HashingEncoderStub, PyramidL2Metric, load_imba, report, run_benchmark

    try:
        cfg = load_config(args.config)
        if args.backend:
            cfg["backend"] = args.backend
        dataset = load_imba(args.dataset)
        if args.limit is not None and args.limit <= 0:
            raise ReportError("--limit must leave at least one sample to report")
        backend = build_backend(cfg)
    except MaskEditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    report_path = Path(args.report)
    checkpoint = report_path.with_suffix(".checkpoint.jsonl")
    try:
        records = run_benchmark(
            dataset, backend, HashingEncoderStub(), PyramidL2Metric(),
            steps=args.steps, limit=args.limit, checkpoint_path=checkpoint,
            progress=lambda i, n: print(f"[{i}/{n}] scored", file=sys.stderr),
        )
        summary = report(records, report_path)
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MaskEditError, OSError) as exc:
        print(f"bench failed: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    cfg = load_config(args.config)
    app = create_app(cfg)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors already; normalize other codes
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.command == "edit":
        return cmd_edit(args)
    if args.command == "bench":
        return cmd_bench(args)
    return cmd_serve(args)


if __name__ == "__main__":
    sys.exit(main())
