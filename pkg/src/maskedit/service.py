"""HTTP job service: upload images, derive masks, queue edits, stream progress.

Request handling is concurrent; pipeline execution is serialized by a small
worker pool (one per device by default). Jobs, events, and artifacts are
durable in the store directory, so a restarted service picks queued jobs back
up and fails interrupted ones cleanly.
"""

from __future__ import annotations

import io
import json
import logging
import threading
import time
from contextlib import asynccontextmanager

import numpy as np
from fastapi import FastAPI, File, Request, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response, StreamingResponse
from PIL import Image

from .config import DEFAULTS, build_backend, build_segmentation_client
from .errors import MaskEditError
from .images import to_uint8
from .mask_input import MaskSpec, resolve_mask
from .masks import SpatialMask, TaskKind
from .pipeline import EditRequest, edit_image
from .store import ArtifactStore, JobStore

logger = logging.getLogger(__name__)

EVENT_POLL_S = 0.02


class EditWorkers:
    """Fixed pool of worker threads draining the job queue FIFO per priority."""

    def __init__(self, store: JobStore, artifacts: ArtifactStore, backend, segmentation_client, count: int):
        self.store = store
        self.artifacts = artifacts
        self.backend = backend
        self.segmentation_client = segmentation_client
        self.count = count
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self):
        for i in range(self.count):
            thread = threading.Thread(target=self._loop, name=f"edit-worker-{i}", daemon=True)
            thread.start()
            self._threads.append(thread)

    def stop(self):
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=5)

    def _loop(self):
        while not self._stop.is_set():
            job = self.store.claim_next_queued()
            if job is None:
                time.sleep(EVENT_POLL_S)
                continue
            try:
                self._run(job)
            except Exception as exc:  # noqa: BLE001 - job failures must not kill the worker
                logger.exception("job %s failed", job.job_id)
                try:
                    self.store.set_state(job.job_id, "failed", reason=str(exc))
                except Exception:
                    pass

    def _run(self, job):
        payload = job.request
        image_bytes = self.artifacts.get_bytes(payload["image_id"])
        mask_bytes = self.artifacts.get_bytes(payload["mask_id"])
        if image_bytes is None or mask_bytes is None:
            raise MaskEditError("job artifacts vanished from the store")
        with Image.open(io.BytesIO(image_bytes)) as img:
            image = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        with Image.open(io.BytesIO(mask_bytes)) as mask_img:
            mask = SpatialMask.from_binary(np.asarray(mask_img.convert("L")) != 0)

        total = int(payload.get("steps", 50))

        def progress(k: int, n: int):
            self.store.set_state(job.job_id, "denoising", step=k)
            if k == n:
                self.store.set_state(job.job_id, "decoding", step=k)

        # the mask artifact is already resolved; hand it over via a scratch file
        import os
        import tempfile

        fd, mask_path = tempfile.mkstemp(suffix=".png")
        os.close(fd)
        try:
            mask.to_png(mask_path)
            request = EditRequest(
                image=image,
                source_mask=MaskSpec.from_file(mask_path),
                target_prompt=payload.get("target_prompt", ""),
                object_word=payload.get("object_word", ""),
                task=TaskKind.parse(payload["task"]),
                guidance_scale=float(payload.get("guidance_scale", 7.5)),
                steps=total,
                seed=int(payload.get("seed", 0)),
            )
            result = edit_image(
                request, self.backend, segmentation_client=self.segmentation_client, progress=progress
            )
        finally:
            os.unlink(mask_path)
        buf = io.BytesIO()
        Image.fromarray(to_uint8(result.image), "RGB").save(buf, format="PNG")
        result_id = self.artifacts.put(buf.getvalue(), kind="result")
        self.store.set_state(job.job_id, "done", step=total, result_id=result_id)


def create_app(cfg: dict | None = None, backend=None, segmentation_client=None) -> FastAPI:
    cfg = {**DEFAULTS, **(cfg or {})}
    store = JobStore(cfg["store_path"])
    artifacts = ArtifactStore(cfg["store_path"])
    if backend is None:
        backend = build_backend(cfg)
    if segmentation_client is None:
        segmentation_client = build_segmentation_client(cfg)
    workers = EditWorkers(store, artifacts, backend, segmentation_client, int(cfg["max_concurrent_jobs"]))

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        store.recover()
        workers.start()
        yield
        workers.stop()

    app = FastAPI(title="maskedit-service", lifespan=lifespan)
    app.state.store = store
    app.state.artifacts = artifacts

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    def error(status: int, message: str):
        return JSONResponse(status_code=status, content={"detail": message})

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok"}

    @app.post("/images", status_code=201)
    async def upload_image(file: UploadFile = File(...)):
        data = await file.read()
        try:
            with Image.open(io.BytesIO(data)) as img:
                img.verify()
        except Exception:
            return error(400, "not a decodable image")
        image_id = artifacts.put(data, kind="image", ext="png")
        return {"image_id": image_id}

    @app.post("/masks", status_code=201)
    async def create_mask(request: Request):
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("multipart/form-data"):
            form = await request.form()
            upload = form.get("mask")
            if upload is None:
                return error(400, "multipart mask upload needs a 'mask' file field")
            data = await upload.read()
            try:
                with Image.open(io.BytesIO(data)) as img:
                    gray = np.asarray(img.convert("L"))
            except Exception:
                return error(400, "mask is not a decodable image")
            # keep already-binary uploads byte-exact; canonicalize anything else
            if np.isin(gray, (0, 255)).all():
                mask_id = artifacts.put(data, kind="mask")
            else:
                canonical = io.BytesIO()
                Image.fromarray((gray != 0).astype(np.uint8) * 255, "L").save(canonical, format="PNG")
                mask_id = artifacts.put(canonical.getvalue(), kind="mask")
            return {"mask_id": mask_id}

        payload = await request.json()
        image_id = payload.get("image_id")
        spec_payload = payload.get("spec")
        if not image_id or not spec_payload:
            return error(400, "mask derivation needs image_id and spec")
        image_bytes = artifacts.get_bytes(image_id)
        if image_bytes is None:
            return error(404, f"unknown image {image_id}")
        if segmentation_client is None:
            return error(400, "no segmentation endpoint configured")
        try:
            spec = MaskSpec.from_json(spec_payload)
        except ValueError as exc:
            return error(400, str(exc))
        with Image.open(io.BytesIO(image_bytes)) as img:
            image = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        try:
            mask = resolve_mask(spec, segmentation_client, image=image)
        except MaskEditError as exc:
            return error(400, str(exc))
        buf = io.BytesIO()
        Image.fromarray(mask.binary().astype(np.uint8) * 255, "L").save(buf, format="PNG")
        mask_id = artifacts.put(buf.getvalue(), kind="mask")
        return {"mask_id": mask_id}

    @app.get("/masks/{mask_id}")
    async def get_mask(mask_id: str):
        data = artifacts.get_bytes(mask_id)
        if data is None:
            return error(404, f"unknown mask {mask_id}")
        return Response(content=data, media_type="image/png")

    @app.post("/edits", status_code=202)
    async def submit_edit(request: Request):
        payload = await request.json()
        for field in ("image_id", "mask_id", "task"):
            if field not in payload:
                return error(400, f"missing field {field!r}")
        if artifacts.get_bytes(payload["image_id"]) is None:
            return error(404, f"unknown image {payload['image_id']}")
        if artifacts.get_bytes(payload["mask_id"]) is None:
            return error(404, f"unknown mask {payload['mask_id']}")
        try:
            task = TaskKind.parse(payload["task"])
        except MaskEditError as exc:
            return error(400, str(exc))
        prompt = payload.get("target_prompt", "")
        if task not in (TaskKind.REMOVE_OBJECT, TaskKind.MODIFY_REGION) and not str(prompt).strip():
            return error(400, f"target_prompt is required for task {task.value!r}")
        steps = int(payload.get("steps", 50))
        if not 10 <= steps <= 200:
            return error(400, "steps must lie in [10, 200]")
        if float(payload.get("guidance_scale", 7.5)) < 1.0:
            return error(400, "guidance_scale must be >= 1")
        if store.active_count() >= int(cfg["queue_size"]):
            return error(503, "queue full; retry later")
        job_id = store.create(payload, total_steps=steps, priority=int(payload.get("priority", 0)))
        return {"job_id": job_id}

    @app.get("/edits/{job_id}")
    async def job_state(job_id: str):
        job = store.get(job_id)
        if job is None:
            return error(404, f"unknown job {job_id}")
        return job.to_json()

    @app.get("/edits/{job_id}/result")
    async def job_result(job_id: str):
        job = store.get(job_id)
        if job is None:
            return error(404, f"unknown job {job_id}")
        if job.state != "done":
            return error(409, f"job is {job.state}, result not available")
        data = artifacts.get_bytes(job.result_id)
        if data is None:
            return error(404, "result artifact missing")
        return Response(content=data, media_type="image/png")

    @app.get("/edits/{job_id}/events")
    async def job_events(job_id: str, request: Request, after: int = 0):
        if store.get(job_id) is None:
            return error(404, f"unknown job {job_id}")

        async def stream():
            import anyio

            last = after
            while True:
                for seq, name, payload in store.events_after(job_id, last):
                    last = seq
                    body = json.dumps({**payload, "seq": seq})
                    yield f"event: {name}\ndata: {body}\n\n"
                    if name in ("done", "failed"):
                        return
                if await request.is_disconnected():
                    return
                await anyio.sleep(EVENT_POLL_S)

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app
