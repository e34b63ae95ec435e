/**
 * Canvas mask state: brush strokes, click points, and an undo stack.
 *
 * The mask is always a pure function of the operation list, so undo/redo
 * replays are exact. Rasterization happens at native image resolution; the
 * viewport may zoom, but exported masks always match the image pixel grid.
 */

import { encodeGrayPng } from "./png.js";

export interface Point {
  x: number;
  y: number;
}

export interface Stroke {
  kind: "add" | "erase";
  points: Point[];
  radius: number;
}

export interface ClickPoint {
  x: number;
  y: number;
  positive: boolean;
}

type MaskOp =
  | { op: "stroke"; stroke: Stroke }
  | { op: "click"; click: ClickPoint }
  | { op: "bitmap"; bits: Uint8Array; mode: "replace" | "union" };

export class EmptyMaskExport extends Error {}

export class CanvasMaskState {
  readonly width: number;
  readonly height: number;
  private ops: MaskOp[] = [];
  private redoStack: MaskOp[] = [];

  constructor(width: number, height: number) {
    if (width <= 0 || height <= 0) throw new Error("mask resolution must be positive");
    this.width = width;
    this.height = height;
  }

  /** Rebuild state from decoded mask pixels (e.g. re-import of an export). */
  static fromBitmap(width: number, height: number, bits: Uint8Array): CanvasMaskState {
    const state = new CanvasMaskState(width, height);
    state.applyBitmap(bits, "replace");
    return state;
  }

  get clickPoints(): ClickPoint[] {
    return this.ops.flatMap((op) => (op.op === "click" ? [op.click] : []));
  }

  addStroke(stroke: Stroke): void {
    if (stroke.points.length === 0) return;
    this.push({ op: "stroke", stroke });
  }

  addClick(click: ClickPoint): void {
    if (!this.inBounds(click.x, click.y)) throw new Error(`click (${click.x}, ${click.y}) outside image`);
    this.push({ op: "click", click });
  }

  /** Server-derived region (e.g. click segmentation response) merged into the mask. */
  applyBitmap(bits: Uint8Array, mode: "replace" | "union" = "union"): void {
    if (bits.length !== this.width * this.height) {
      throw new Error(`bitmap length ${bits.length} does not match ${this.width}x${this.height}`);
    }
    this.push({ op: "bitmap", bits: Uint8Array.from(bits), mode });
  }

  undo(): boolean {
    const op = this.ops.pop();
    if (!op) return false;
    this.redoStack.push(op);
    return true;
  }

  redo(): boolean {
    const op = this.redoStack.pop();
    if (!op) return false;
    this.ops.push(op);
    return true;
  }

  clear(): void {
    this.ops = [];
    this.redoStack = [];
  }

  isEmpty(): boolean {
    return !this.rasterize().some((v) => v !== 0);
  }

  /** 0/1 per pixel, row-major, replaying the full operation list. */
  rasterize(): Uint8Array {
    const bits = new Uint8Array(this.width * this.height);
    for (const op of this.ops) {
      if (op.op === "stroke") this.stampStroke(bits, op.stroke);
      else if (op.op === "bitmap") {
        for (let i = 0; i < bits.length; i++) {
          const on = op.bits[i]! !== 0 ? 1 : 0;
          bits[i] = op.mode === "replace" ? on : bits[i]! | on;
        }
      }
      // click ops carry no pixels themselves; their derived region arrives
      // from the segmentation service as a bitmap op
    }
    return bits;
  }

  /** Single-channel PNG (0/255); blocked client-side when the mask is empty. */
  exportPng(): Uint8Array {
    const bits = this.rasterize();
    if (!bits.some((v) => v !== 0)) {
      throw new EmptyMaskExport("mask is empty; paint or derive a region first");
    }
    const pixels = new Uint8Array(bits.length);
    for (let i = 0; i < bits.length; i++) pixels[i] = bits[i]! ? 255 : 0;
    return encodeGrayPng(this.width, this.height, pixels);
  }

  private push(op: MaskOp): void {
    this.ops.push(op);
    this.redoStack = [];
  }

  private inBounds(x: number, y: number): boolean {
    return x >= 0 && x < this.width && y >= 0 && y < this.height;
  }

  private stampStroke(bits: Uint8Array, stroke: Stroke): void {
    const value = stroke.kind === "add" ? 1 : 0;
    const pts = stroke.points;
    for (let i = 0; i < pts.length; i++) {
      const from = pts[Math.max(i - 1, 0)]!;
      const to = pts[i]!;
      const span = Math.max(Math.abs(to.x - from.x), Math.abs(to.y - from.y));
      const steps = Math.max(1, Math.ceil(span / Math.max(stroke.radius / 2, 1)));
      for (let s = 0; s <= steps; s++) {
        const cx = from.x + ((to.x - from.x) * s) / steps;
        const cy = from.y + ((to.y - from.y) * s) / steps;
        this.stampDisk(bits, cx, cy, stroke.radius, value);
      }
    }
  }

  private stampDisk(bits: Uint8Array, cx: number, cy: number, radius: number, value: 0 | 1): void {
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.floor(cx - radius));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + radius));
    const y0 = Math.max(0, Math.floor(cy - radius));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + radius));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy <= r2) bits[y * this.width + x] = value;
      }
    }
  }
}
