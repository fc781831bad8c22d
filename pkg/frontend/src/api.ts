/** REST client for the shape-variation service.
 *
 * Every mutating request carries a client-generated request id; the server
 * replays the cached response for a retried id, so network-level retries
 * can never duplicate an edit.
 */

import type { SampleResult, SessionInfo, TrainingStatus, VoxelBox } from "./types.js";

export type FetchLike = (
  url: string,
  init?: RequestInit,
) => Promise<Response>;

let requestCounter = 0;

export function freshRequestId(): string {
  requestCounter += 1;
  return `rq-${Date.now().toString(36)}-${requestCounter}-${Math.floor(
    Math.random() * 1e9,
  ).toString(36)}`;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

export class StudioApi {
  constructor(
    private base: string,
    private fetchImpl: FetchLike = fetch.bind(globalThis),
    private retries = 2,
  ) {}

  private async json<T>(resp: Response): Promise<T> {
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const body = await resp.json();
        detail = body.detail ?? JSON.stringify(body);
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(resp.status, detail);
    }
    return (await resp.json()) as T;
  }

  /** POST with an idempotency id, retrying on network failure only. */
  private async mutate<T>(url: string, body: Record<string, unknown>): Promise<T> {
    const payload = { ...body, request_id: freshRequestId() };
    let lastError: unknown;
    for (let attempt = 0; attempt <= this.retries; attempt++) {
      try {
        const resp = await this.fetchImpl(this.base + url, {
          method: "POST",
          headers: { "content-type": "application/json" },
          body: JSON.stringify(payload),
        });
        return await this.json<T>(resp);
      } catch (err) {
        if (err instanceof ApiError) throw err; // server answered: no retry
        lastError = err;
      }
    }
    throw lastError instanceof Error
      ? lastError
      : new Error("network failure after retries");
  }

  async createSession(
    mesh: ArrayBuffer,
    format: "ply" | "obj",
    overrides: Record<string, string | number> = {},
  ): Promise<{ session_id: string }> {
    const params = new URLSearchParams({ format });
    for (const [k, v] of Object.entries(overrides)) params.set(k, String(v));
    const resp = await this.fetchImpl(`${this.base}/sessions?${params}`, {
      method: "POST",
      body: mesh,
    });
    return this.json(resp);
  }

  session(id: string): Promise<SessionInfo> {
    return this.fetchImpl(`${this.base}/sessions/${id}`).then((r) =>
      this.json<SessionInfo>(r),
    );
  }

  startTraining(id: string): Promise<{ state: string }> {
    return this.mutate(`/sessions/${id}/train`, {});
  }

  trainingStatus(id: string): Promise<TrainingStatus> {
    return this.fetchImpl(`${this.base}/sessions/${id}/train/status`).then((r) =>
      this.json<TrainingStatus>(r),
    );
  }

  /** Poll until training finishes; reports progress via the callback. */
  async waitForTraining(
    id: string,
    onProgress: (s: TrainingStatus) => void,
    intervalMs = 1000,
    timeoutMs = 3_600_000,
  ): Promise<TrainingStatus> {
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const status = await this.trainingStatus(id);
      onProgress(status);
      if (status.state === "done" || status.state === "failed") return status;
      if (Date.now() > deadline) throw new Error("training poll timed out");
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
  }

  sample(id: string, seed?: number): Promise<SampleResult> {
    return this.mutate(`/sessions/${id}/sample`, seed === undefined ? {} : { seed });
  }

  resize(
    id: string,
    resolution: [number, number, number],
    seed?: number,
  ): Promise<SampleResult> {
    return this.mutate(`/sessions/${id}/resize`, { resolution, seed });
  }

  edit(
    id: string,
    level: number,
    src: VoxelBox,
    dstOrigin: [number, number, number],
    baseSample?: string,
    seed?: number,
  ): Promise<SampleResult> {
    return this.mutate(`/sessions/${id}/edit`, {
      level,
      src_min: src.min,
      src_max: src.max,
      dst_origin: dstOrigin,
      sample: baseSample,
      seed,
    });
  }

  async points(
    id: string,
    level: number,
    sample?: string,
  ): Promise<ArrayBuffer> {
    const params = sample ? `?sample=${encodeURIComponent(sample)}` : "";
    const resp = await this.fetchImpl(
      `${this.base}/sessions/${id}/levels/${level}/points${params}`,
    );
    if (!resp.ok) throw new ApiError(resp.status, resp.statusText);
    return resp.arrayBuffer();
  }
}
