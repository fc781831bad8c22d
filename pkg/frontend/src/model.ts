/** Headless view model: all state transitions of the studio UI.
 *
 * The DOM layer only renders this model and forwards gestures, so the
 * whole interactive loop is testable without a browser. Geometry is never
 * mutated client-side; every change round-trips through the service.
 */

import { StudioApi } from "./api.js";
import { boxIsValid, clampDestination } from "./boxmath.js";
import { parsePly } from "./ply.js";
import type { PointCloud, SessionInfo, VoxelBox } from "./types.js";

export interface LevelView {
  level: number;
  cloud: PointCloud;
}

export class StudioModel {
  info: SessionInfo | null = null;
  activeSample: string | null = null;
  previousSample: string | null = null; // kept for A/B comparison
  visibleLevel = 2; // editing defaults to an intermediate level
  normalColoring = false;
  selection: VoxelBox | null = null;
  status = "idle";
  clouds = new Map<string, LevelView[]>(); // sample id -> per-level points
  busy = false;

  constructor(private api: StudioApi) {}

  get sessionId(): string {
    if (!this.info) throw new Error("no session");
    return this.info.session_id;
  }

  levelResolution(level: number): [number, number, number] {
    if (!this.info) throw new Error("no session");
    return this.info.resolutions[level - 1];
  }

  async openSession(id: string): Promise<void> {
    this.info = await this.api.session(id);
    this.visibleLevel = Math.min(2, this.info.levels);
    this.activeSample = this.info.latest_sample;
    if (this.activeSample) await this.loadSample(this.activeSample);
  }

  async createSession(
    mesh: ArrayBuffer,
    format: "ply" | "obj",
    overrides: Record<string, string | number> = {},
  ): Promise<string> {
    const { session_id } = await this.api.createSession(mesh, format, overrides);
    await this.openSession(session_id);
    return session_id;
  }

  async train(onProgress: (line: string) => void): Promise<void> {
    await this.api.startTraining(this.sessionId);
    const status = await this.api.waitForTraining(this.sessionId, (s) => {
      const lines = Object.entries(s.levels)
        .map(([l, p]) => `L${l} ${p.phase} ${p.iteration} (loss ${p.loss.toFixed(4)})`)
        .join("  ");
      onProgress(`${s.state} ${lines}`);
    });
    if (status.state === "failed") {
      throw new Error(status.error ?? "training failed");
    }
    this.info = await this.api.session(this.sessionId);
  }

  /** Fetch and parse every level's point payload for a sample. */
  async loadSample(sampleId: string): Promise<LevelView[]> {
    if (!this.clouds.has(sampleId)) {
      const views: LevelView[] = [];
      const levels = this.info?.levels ?? 0;
      for (let level = 1; level <= levels; level++) {
        const payload = await this.api.points(this.sessionId, level, sampleId);
        views.push({ level, cloud: parsePly(payload) });
      }
      this.clouds.set(sampleId, views);
    }
    return this.clouds.get(sampleId)!;
  }

  visibleCloud(sampleId: string | null = this.activeSample): PointCloud | null {
    if (!sampleId) return null;
    const views = this.clouds.get(sampleId);
    if (!views) return null;
    return views.find((v) => v.level === this.visibleLevel)?.cloud ?? null;
  }

  private swapToSample(sampleId: string): void {
    this.previousSample = this.activeSample;
    this.activeSample = sampleId;
  }

  async generate(seed?: number): Promise<string> {
    return this.runMutation(async () => {
      const result = await this.api.sample(this.sessionId, seed);
      await this.loadSample(result.sample_id);
      this.swapToSample(result.sample_id);
      return result.sample_id;
    });
  }

  async resize(
    resolution: [number, number, number],
    seed?: number,
  ): Promise<string> {
    return this.runMutation(async () => {
      const result = await this.api.resize(this.sessionId, resolution, seed);
      await this.loadSample(result.sample_id);
      this.swapToSample(result.sample_id);
      return result.sample_id;
    });
  }

  /** Validate the selection client-side, then post the copy/paste edit. */
  async submitEdit(
    destination: [number, number, number],
    seed?: number,
  ): Promise<string> {
    const selection = this.selection;
    if (!selection) throw new Error("no box selected");
    const res = this.levelResolution(this.visibleLevel);
    if (!boxIsValid(selection, res)) {
      throw new Error("selection box is invalid for this level");
    }
    if (!this.activeSample) throw new Error("no sample to edit");
    const dst = clampDestination(selection, destination, res);
    return this.runMutation(async () => {
      const result = await this.api.edit(
        this.sessionId,
        this.visibleLevel,
        selection,
        dst,
        this.activeSample ?? undefined,
        seed,
      );
      await this.loadSample(result.sample_id);
      this.swapToSample(result.sample_id);
      return result.sample_id;
    });
  }

  /** One in-flight mutation at a time, mirroring the server-side lock. */
  private async runMutation<T>(fn: () => Promise<T>): Promise<T> {
    if (this.busy) throw new Error("another request is in flight");
    this.busy = true;
    try {
      return await fn();
    } finally {
      this.busy = false;
    }
  }
}
