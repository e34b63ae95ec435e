/** Request parameters mirroring the edit service's job schema one-to-one. */

export type TaskName = "replace" | "pose" | "background" | "remove" | "region";

export const ALL_TASKS: TaskName[] = ["replace", "pose", "background", "remove", "region"];

export interface EditRequestParams {
  imageId: string;
  maskId: string;
  task: TaskName;
  targetPrompt: string;
  objectWord: string;
  guidanceScale: number;
  steps: number;
  seed: number;
}

export const DEFAULT_PARAMS = {
  targetPrompt: "",
  objectWord: "",
  guidanceScale: 7.5,
  steps: 50,
  seed: 0,
} as const;

/** Wire payload for POST /edits; key names are the service's schema. */
export function toWire(params: EditRequestParams): Record<string, unknown> {
  return {
    image_id: params.imageId,
    mask_id: params.maskId,
    task: params.task,
    target_prompt: params.targetPrompt,
    object_word: params.objectWord,
    guidance_scale: params.guidanceScale,
    steps: params.steps,
    seed: params.seed,
  };
}

/** Tasks that can run with an empty prompt (the prompt field is optional). */
export function promptRequired(task: TaskName): boolean {
  return task !== "remove" && task !== "region";
}

export interface JobEvent {
  name: string;
  seq: number;
  step?: number;
  total?: number;
  reason?: string;
}

export interface JobSnapshot {
  job_id: string;
  state: string;
  step?: number;
  total_steps?: number;
  reason?: string;
  result_id?: string;
}
