/** Shared types for the studio client. */

export interface VoxelBox {
  min: [number, number, number];
  max: [number, number, number]; // exclusive
}

export interface SessionInfo {
  session_id: string;
  levels: number;
  resolutions: [number, number, number][];
  trained: boolean;
  training: TrainingStatus;
  samples: string[];
  latest_sample: string | null;
}

export interface TrainingStatus {
  state: "idle" | "running" | "done" | "failed";
  levels: Record<string, { phase: string; iteration: number; loss: number }>;
  error?: string;
}

export interface SampleResult {
  sample_id: string;
  levels: number[]; // active voxel count per level
}

export interface PointCloud {
  count: number;
  positions: Float32Array; // xyz per point
  normals: Float32Array;
  colors: Float32Array; // rgb in [0,1]
}

export interface ViewState {
  sessionId: string | null;
  activeSample: string | null;
  compareSample: string | null;
  visibleLevel: number;
  normalColoring: boolean;
  selection: VoxelBox | null; // in the visible level's index space
  pendingEdits: number;
}
