/**
 * One editing session: submit a request, follow progress, keep history.
 *
 * The progress counter is validated to be strictly increasing; a regression
 * means the stream replayed or the service misbehaved, and the flow fails
 * loudly rather than rendering a lying progress bar.
 */

import type { EditServiceClient } from "./apiClient.js";
import type { EditRequestParams, JobEvent } from "./types.js";

export interface ProgressUpdate {
  step: number;
  total: number;
}

export interface HistoryEntry {
  jobId: string;
  request: EditRequestParams;
  resultBytes: Uint8Array;
  finishedAt: number;
}

export interface RunCallbacks {
  onState?: (state: string) => void;
  onProgress?: (update: ProgressUpdate) => void;
}

export class ProgressRegression extends Error {}

export class EditFlow {
  readonly history: HistoryEntry[] = [];
  private running = false;

  constructor(private readonly client: EditServiceClient) {}

  get busy(): boolean {
    return this.running;
  }

  /** Submit, stream events to the callbacks, and resolve with the result bytes. */
  async run(request: EditRequestParams, callbacks: RunCallbacks = {}): Promise<HistoryEntry> {
    if (this.running) throw new Error("one edit at a time per session");
    this.running = true;
    try {
      const jobId = await this.client.submitEdit(request);
      let lastStep = 0;
      let failure: string | undefined;
      await this.client.streamEvents(jobId, (event: JobEvent) => {
        callbacks.onState?.(event.name);
        if (event.name === "denoising") {
          const step = event.step ?? 0;
          if (step <= lastStep) {
            throw new ProgressRegression(`step ${step} after ${lastStep}`);
          }
          lastStep = step;
          callbacks.onProgress?.({ step, total: event.total ?? 0 });
        }
        if (event.name === "failed") failure = event.reason ?? "unknown failure";
      });
      if (failure !== undefined) throw new Error(`edit failed: ${failure}`);
      const resultBytes = await this.client.fetchResult(jobId);
      const entry: HistoryEntry = {
        jobId,
        request: { ...request },
        resultBytes,
        finishedAt: Date.now(),
      };
      this.history.push(entry);
      return entry;
    } finally {
      this.running = false;
    }
  }

  /** Exact parameters of a past run, ready to resubmit or tweak. */
  reload(index: number): EditRequestParams {
    const entry = this.history[index];
    if (!entry) throw new Error(`no history entry ${index}`);
    return { ...entry.request };
  }

  /** Push a past result into a new session: upload it as the next input image. */
  async useAsInput(entry: HistoryEntry): Promise<string> {
    return this.client.uploadImage(entry.resultBytes, "previous-result.png");
  }
}
