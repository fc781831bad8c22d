/** Voxel-box selection math in level index space.
 *
 * The server's paste semantics are axis-aligned boxes in the level's own
 * integer grid, so every UI gesture reduces to integer box arithmetic here.
 */

import type { VoxelBox } from "./types.js";

export function boxExtents(box: VoxelBox): [number, number, number] {
  return [
    box.max[0] - box.min[0],
    box.max[1] - box.min[1],
    box.max[2] - box.min[2],
  ];
}

export function boxIsValid(
  box: VoxelBox,
  resolution: [number, number, number],
): boolean {
  for (let a = 0; a < 3; a++) {
    if (!Number.isInteger(box.min[a]) || !Number.isInteger(box.max[a])) {
      return false;
    }
    if (box.max[a] <= box.min[a]) return false; // zero or negative extent
    if (box.min[a] < 0 || box.max[a] > resolution[a]) return false;
  }
  return true;
}

/** Clamp an arbitrary drag result to a valid box inside the resolution. */
export function normalizeDrag(
  a: [number, number, number],
  b: [number, number, number],
  resolution: [number, number, number],
): VoxelBox | null {
  const min: [number, number, number] = [0, 0, 0];
  const max: [number, number, number] = [0, 0, 0];
  for (let axis = 0; axis < 3; axis++) {
    const lo = Math.max(0, Math.floor(Math.min(a[axis], b[axis])));
    const hi = Math.min(resolution[axis], Math.ceil(Math.max(a[axis], b[axis])));
    if (hi <= lo) return null; // zero-extent drags are rejected client-side
    min[axis] = lo;
    max[axis] = hi;
  }
  return { min, max };
}

/** Destination origin such that the translated box stays in bounds. */
export function clampDestination(
  box: VoxelBox,
  origin: [number, number, number],
  resolution: [number, number, number],
): [number, number, number] {
  const ext = boxExtents(box);
  return [0, 1, 2].map((a) =>
    Math.min(Math.max(Math.round(origin[a]), 0), resolution[a] - ext[a]),
  ) as [number, number, number];
}

export function translateBox(
  box: VoxelBox,
  origin: [number, number, number],
): VoxelBox {
  const ext = boxExtents(box);
  return {
    min: [...origin] as [number, number, number],
    max: [origin[0] + ext[0], origin[1] + ext[1], origin[2] + ext[2]],
  };
}

/** Resize sliders scale the level-1 resolution per axis, rounded to ints. */
export function scaledResolution(
  base: [number, number, number],
  factors: [number, number, number],
  minimum = 4,
): [number, number, number] {
  return [0, 1, 2].map((a) =>
    Math.max(minimum, Math.round(base[a] * factors[a])),
  ) as [number, number, number];
}

/** Box coordinates double per level below the working level. */
export function boxAtFinerLevel(box: VoxelBox, levelsDown: number): VoxelBox {
  const f = 2 ** levelsDown;
  return {
    min: [box.min[0] * f, box.min[1] * f, box.min[2] * f],
    max: [box.max[0] * f, box.max[1] * f, box.max[2] * f],
  };
}
