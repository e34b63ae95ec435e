/**
 * Thin typed client for the edit service. No editing math lives here or
 * anywhere else in the UI; everything is delegated to the HTTP API.
 */

import type { EditRequestParams, JobEvent, JobSnapshot } from "./types.js";
import { toWire } from "./types.js";

export class ServiceError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(`service ${status}: ${message}`);
  }
}

interface MultipartFile {
  field: string;
  filename: string;
  contentType: string;
  bytes: Uint8Array;
}

/** Dependency-free multipart body (works in browsers and Node alike). */
export function buildMultipart(file: MultipartFile): { body: Uint8Array; contentType: string } {
  const boundary = `maskedit-${Math.random().toString(36).slice(2)}${Date.now().toString(36)}`;
  const head = new TextEncoder().encode(
    `--${boundary}\r\n` +
      `Content-Disposition: form-data; name="${file.field}"; filename="${file.filename}"\r\n` +
      `Content-Type: ${file.contentType}\r\n\r\n`,
  );
  const tail = new TextEncoder().encode(`\r\n--${boundary}--\r\n`);
  const body = new Uint8Array(head.length + file.bytes.length + tail.length);
  body.set(head, 0);
  body.set(file.bytes, head.length);
  body.set(tail, head.length + file.bytes.length);
  return { body, contentType: `multipart/form-data; boundary=${boundary}` };
}

async function raiseForStatus(response: Response): Promise<void> {
  if (response.ok) return;
  let detail = response.statusText;
  try {
    const payload = (await response.json()) as { detail?: unknown };
    if (payload.detail) detail = JSON.stringify(payload.detail);
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ServiceError(response.status, detail);
}

export class EditServiceClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  private url(path: string): string {
    return `${this.baseUrl.replace(/\/$/, "")}${path}`;
  }

  async uploadImage(bytes: Uint8Array, filename = "image.png"): Promise<string> {
    const { body, contentType } = buildMultipart({
      field: "file",
      filename,
      contentType: "image/png",
      bytes,
    });
    const response = await this.fetchImpl(this.url("/images"), {
      method: "POST",
      headers: { "content-type": contentType },
      body: body as unknown as BodyInit,
    });
    await raiseForStatus(response);
    return ((await response.json()) as { image_id: string }).image_id;
  }

  async uploadMask(png: Uint8Array): Promise<string> {
    const { body, contentType } = buildMultipart({
      field: "mask",
      filename: "mask.png",
      contentType: "image/png",
      bytes: png,
    });
    const response = await this.fetchImpl(this.url("/masks"), {
      method: "POST",
      headers: { "content-type": contentType },
      body: body as unknown as BodyInit,
    });
    await raiseForStatus(response);
    return ((await response.json()) as { mask_id: string }).mask_id;
  }

  async fetchMask(maskId: string): Promise<Uint8Array> {
    const response = await this.fetchImpl(this.url(`/masks/${maskId}`));
    await raiseForStatus(response);
    return new Uint8Array(await response.arrayBuffer());
  }

  async submitEdit(params: EditRequestParams): Promise<string> {
    const response = await this.fetchImpl(this.url("/edits"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(toWire(params)),
    });
    await raiseForStatus(response);
    return ((await response.json()) as { job_id: string }).job_id;
  }

  async getJob(jobId: string): Promise<JobSnapshot> {
    const response = await this.fetchImpl(this.url(`/edits/${jobId}`));
    await raiseForStatus(response);
    return (await response.json()) as JobSnapshot;
  }

  async fetchResult(jobId: string): Promise<Uint8Array> {
    const response = await this.fetchImpl(this.url(`/edits/${jobId}/result`));
    await raiseForStatus(response);
    return new Uint8Array(await response.arrayBuffer());
  }

  /**
   * Follow the job's server-sent events until a terminal event arrives.
   * Reconnects resume from the last seen sequence number.
   */
  async streamEvents(jobId: string, onEvent: (event: JobEvent) => void, signal?: AbortSignal): Promise<void> {
    let lastSeq = 0;
    for (;;) {
      const response = await this.fetchImpl(this.url(`/edits/${jobId}/events?after=${lastSeq}`), {
        signal: signal ?? null,
      });
      await raiseForStatus(response);
      if (!response.body) throw new ServiceError(0, "event stream has no body");
      const reader = response.body.getReader();
      const decoder = new TextDecoder();
      let buffer = "";
      let eventName = "";
      for (;;) {
        const { done, value } = await reader.read();
        if (value) buffer += decoder.decode(value, { stream: true });
        let sep: number;
        while ((sep = buffer.indexOf("\n\n")) >= 0) {
          const frame = buffer.slice(0, sep);
          buffer = buffer.slice(sep + 2);
          for (const line of frame.split("\n")) {
            if (line.startsWith("event: ")) eventName = line.slice(7).trim();
            else if (line.startsWith("data: ")) {
              const payload = JSON.parse(line.slice(6)) as Omit<JobEvent, "name">;
              const event: JobEvent = { name: eventName, ...payload };
              lastSeq = event.seq;
              onEvent(event);
              if (event.name === "done" || event.name === "failed") return;
            }
          }
        }
        if (done) break;
      }
      // stream ended without a terminal event: reconnect with resume token
    }
  }
}
