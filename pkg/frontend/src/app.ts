/**
 * Browser wiring: upload, paint, submit, watch progress, compare, iterate.
 * All logic with behavior worth testing lives in the imported modules; this
 * file only binds them to the DOM.
 */

import { EditServiceClient } from "./apiClient.js";
import { EditFlow, type HistoryEntry } from "./editFlow.js";
import { CanvasMaskState, EmptyMaskExport } from "./maskState.js";
import { ALL_TASKS, DEFAULT_PARAMS, promptRequired, type EditRequestParams, type TaskName } from "./types.js";

const serviceUrl = new URLSearchParams(location.search).get("service") ?? "http://127.0.0.1:8585";
const client = new EditServiceClient(serviceUrl);
const flow = new EditFlow(client);

function toBlob(bytes: Uint8Array): Blob {
  const copy = new Uint8Array(bytes.length);
  copy.set(bytes);
  return new Blob([copy.buffer]);
}

const el = <T extends HTMLElement>(id: string): T => {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
};

const fileInput = el<HTMLInputElement>("file");
const imageCanvas = el<HTMLCanvasElement>("image-canvas");
const maskCanvas = el<HTMLCanvasElement>("mask-canvas");
const beforeCanvas = el<HTMLCanvasElement>("before-canvas");
const resultCanvas = el<HTMLCanvasElement>("result-canvas");
const compare = el<HTMLInputElement>("compare");
const taskSelect = el<HTMLSelectElement>("task");
const promptInput = el<HTMLInputElement>("prompt");
const objectWordInput = el<HTMLInputElement>("object-word");
const guidanceInput = el<HTMLInputElement>("guidance");
const stepsInput = el<HTMLInputElement>("steps");
const seedInput = el<HTMLInputElement>("seed");
const brushInput = el<HTMLInputElement>("brush");
const modeSelect = el<HTMLSelectElement>("mode");
const runButton = el<HTMLButtonElement>("run");
const undoButton = el<HTMLButtonElement>("undo");
const redoButton = el<HTMLButtonElement>("redo");
const clearButton = el<HTMLButtonElement>("clear");
const progressBar = el<HTMLProgressElement>("progress");
const statusLine = el<HTMLSpanElement>("status");
const historyList = el<HTMLUListElement>("history");

let imageId: string | null = null;
let imageBitmap: ImageBitmap | null = null;
let mask: CanvasMaskState | null = null;
let drawing = false;
let strokePoints: { x: number; y: number }[] = [];

for (const task of ALL_TASKS) {
  const option = document.createElement("option");
  option.value = task;
  option.textContent = task;
  taskSelect.appendChild(option);
}
guidanceInput.value = String(DEFAULT_PARAMS.guidanceScale);
stepsInput.value = String(DEFAULT_PARAMS.steps);
seedInput.value = String(DEFAULT_PARAMS.seed);

function setStatus(text: string): void {
  statusLine.textContent = text;
}

taskSelect.addEventListener("change", () => {
  const task = taskSelect.value as TaskName;
  promptInput.placeholder = promptRequired(task) ? "target prompt (required)" : "target prompt (optional)";
  promptInput.required = promptRequired(task);
});

fileInput.addEventListener("change", async () => {
  const file = fileInput.files?.[0];
  if (!file) return;
  const bytes = new Uint8Array(await file.arrayBuffer());
  imageBitmap = await createImageBitmap(toBlob(bytes));
  for (const canvas of [imageCanvas, maskCanvas, beforeCanvas, resultCanvas]) {
    canvas.width = imageBitmap.width;
    canvas.height = imageBitmap.height;
  }
  imageCanvas.getContext("2d")!.drawImage(imageBitmap, 0, 0);
  beforeCanvas.getContext("2d")!.drawImage(imageBitmap, 0, 0);
  mask = new CanvasMaskState(imageBitmap.width, imageBitmap.height);
  renderMask();
  setStatus("uploading image…");
  imageId = await client.uploadImage(bytes, file.name);
  setStatus(`image ${imageId.slice(0, 10)}… ready; paint a mask`);
});

function canvasPoint(event: PointerEvent): { x: number; y: number } {
  const rect = maskCanvas.getBoundingClientRect();
  return {
    x: ((event.clientX - rect.left) / rect.width) * maskCanvas.width,
    y: ((event.clientY - rect.top) / rect.height) * maskCanvas.height,
  };
}

maskCanvas.addEventListener("pointerdown", async (event) => {
  if (!mask || !imageId) return;
  const point = canvasPoint(event);
  if (modeSelect.value === "click") {
    const positive = !event.shiftKey;
    mask.addClick({ x: Math.round(point.x), y: Math.round(point.y), positive });
    setStatus("deriving region from clicks…");
    const response = await fetch(`${serviceUrl}/masks`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({
        image_id: imageId,
        spec: { kind: "clicks", clicks: mask.clickPoints.map((c) => [c.x, c.y, c.positive]) },
      }),
    });
    if (response.ok) {
      const { mask_id } = (await response.json()) as { mask_id: string };
      const png = await client.fetchMask(mask_id);
      const bitmap = await createImageBitmap(toBlob(png));
      const scratch = document.createElement("canvas");
      scratch.width = bitmap.width;
      scratch.height = bitmap.height;
      const ctx = scratch.getContext("2d")!;
      ctx.drawImage(bitmap, 0, 0);
      const data = ctx.getImageData(0, 0, bitmap.width, bitmap.height).data;
      const bits = new Uint8Array(bitmap.width * bitmap.height);
      for (let i = 0; i < bits.length; i++) bits[i] = data[i * 4]! !== 0 ? 1 : 0;
      mask.applyBitmap(bits, "replace");
      renderMask();
      setStatus("region derived from clicks");
    } else {
      setStatus(`segmentation failed (${response.status})`);
    }
    return;
  }
  drawing = true;
  strokePoints = [point];
  maskCanvas.setPointerCapture(event.pointerId);
});

maskCanvas.addEventListener("pointermove", (event) => {
  if (!drawing || !mask) return;
  strokePoints.push(canvasPoint(event));
  previewStroke();
});

maskCanvas.addEventListener("pointerup", () => {
  if (!drawing || !mask) return;
  drawing = false;
  mask.addStroke({
    kind: modeSelect.value === "erase" ? "erase" : "add",
    points: strokePoints,
    radius: Number(brushInput.value),
  });
  strokePoints = [];
  renderMask();
});

undoButton.addEventListener("click", () => {
  mask?.undo();
  renderMask();
});
redoButton.addEventListener("click", () => {
  mask?.redo();
  renderMask();
});
clearButton.addEventListener("click", () => {
  mask?.clear();
  renderMask();
});

function renderMask(): void {
  if (!mask) return;
  const ctx = maskCanvas.getContext("2d")!;
  ctx.clearRect(0, 0, maskCanvas.width, maskCanvas.height);
  const bits = mask.rasterize();
  const overlay = ctx.createImageData(maskCanvas.width, maskCanvas.height);
  for (let i = 0; i < bits.length; i++) {
    if (bits[i]) {
      overlay.data[i * 4] = 255;
      overlay.data[i * 4 + 3] = 110;
    }
  }
  ctx.putImageData(overlay, 0, 0);
}

function previewStroke(): void {
  renderMask();
  const ctx = maskCanvas.getContext("2d")!;
  ctx.strokeStyle = modeSelect.value === "erase" ? "rgba(30,30,30,0.8)" : "rgba(255,60,60,0.8)";
  ctx.lineWidth = Number(brushInput.value) * 2;
  ctx.lineCap = "round";
  ctx.beginPath();
  strokePoints.forEach((p, i) => (i ? ctx.lineTo(p.x, p.y) : ctx.moveTo(p.x, p.y)));
  ctx.stroke();
}

compare.addEventListener("input", () => {
  const fraction = Number(compare.value) / 100;
  resultCanvas.style.clipPath = `inset(0 0 0 ${fraction * 100}%)`;
});

runButton.addEventListener("click", async () => {
  if (!imageId || !mask) {
    setStatus("load an image first");
    return;
  }
  const task = taskSelect.value as TaskName;
  if (promptRequired(task) && !promptInput.value.trim()) {
    setStatus("this task needs a prompt");
    return;
  }
  let maskPng: Uint8Array;
  try {
    maskPng = mask.exportPng();
  } catch (error) {
    setStatus(error instanceof EmptyMaskExport ? error.message : String(error));
    return;
  }
  runButton.disabled = true;
  try {
    setStatus("uploading mask…");
    const maskId = await client.uploadMask(maskPng);
    const request: EditRequestParams = {
      imageId,
      maskId,
      task,
      targetPrompt: promptInput.value,
      objectWord: objectWordInput.value,
      guidanceScale: Number(guidanceInput.value),
      steps: Number(stepsInput.value),
      seed: Number(seedInput.value),
    };
    progressBar.max = request.steps;
    progressBar.value = 0;
    const entry = await flow.run(request, {
      onState: (state) => setStatus(state),
      onProgress: ({ step, total }) => {
        progressBar.max = total;
        progressBar.value = step;
        setStatus(`denoising ${step}/${total}`);
      },
    });
    await showResult(entry);
    appendHistory(entry);
    setStatus("done — drag the slider to compare");
  } catch (error) {
    setStatus(`failed: ${error instanceof Error ? error.message : error}`);
  } finally {
    runButton.disabled = false;
  }
});

async function showResult(entry: HistoryEntry): Promise<void> {
  const bitmap = await createImageBitmap(toBlob(entry.resultBytes));
  resultCanvas.width = bitmap.width;
  resultCanvas.height = bitmap.height;
  resultCanvas.getContext("2d")!.drawImage(bitmap, 0, 0);
  if (imageBitmap) beforeCanvas.getContext("2d")!.drawImage(imageBitmap, 0, 0);
  compare.value = "50";
  resultCanvas.style.clipPath = "inset(0 0 0 50%)";
}

function appendHistory(entry: HistoryEntry): void {
  const index = flow.history.length - 1;
  const item = document.createElement("li");
  item.textContent = `#${index + 1} ${entry.request.task}: "${entry.request.targetPrompt}" `;
  const reload = document.createElement("button");
  reload.textContent = "reload";
  reload.addEventListener("click", () => {
    const params = flow.reload(index);
    taskSelect.value = params.task;
    promptInput.value = params.targetPrompt;
    objectWordInput.value = params.objectWord;
    guidanceInput.value = String(params.guidanceScale);
    stepsInput.value = String(params.steps);
    seedInput.value = String(params.seed);
    setStatus(`loaded parameters of run #${index + 1}`);
  });
  const iterate = document.createElement("button");
  iterate.textContent = "use as input";
  iterate.addEventListener("click", async () => {
    setStatus("starting a new session from this result…");
    imageId = await flow.useAsInput(entry);
    const bitmap = await createImageBitmap(toBlob(entry.resultBytes));
    imageBitmap = bitmap;
    imageCanvas.getContext("2d")!.drawImage(bitmap, 0, 0);
    mask = new CanvasMaskState(bitmap.width, bitmap.height);
    renderMask();
    setStatus("previous result is now the input; paint a mask");
  });
  item.append(reload, iterate);
  historyList.appendChild(item);
}
