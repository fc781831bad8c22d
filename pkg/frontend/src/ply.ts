/** Minimal binary little-endian PLY reader for the service's point payloads.
 *
 * Expects the fixed layout the service emits: float x y z nx ny nz and
 * uchar red green blue per vertex.
 */

import type { PointCloud } from "./types.js";

const HEADER_END = "end_header\n";

export function parsePly(buffer: ArrayBuffer): PointCloud {
  const bytes = new Uint8Array(buffer);
  const headerLimit = Math.min(bytes.length, 4096);
  const headerText = new TextDecoder("ascii").decode(
    bytes.subarray(0, headerLimit),
  );
  const end = headerText.indexOf(HEADER_END);
  if (!headerText.startsWith("ply") || end < 0) {
    throw new Error("malformed PLY payload");
  }
  const header = headerText.slice(0, end);
  if (!header.includes("format binary_little_endian")) {
    throw new Error("expected binary little-endian PLY");
  }
  const vertexLine = header
    .split("\n")
    .find((l) => l.startsWith("element vertex"));
  if (!vertexLine) throw new Error("PLY missing vertex element");
  const count = parseInt(vertexLine.split(/\s+/)[2], 10);
  if (!Number.isFinite(count) || count < 0) {
    throw new Error("bad vertex count");
  }

  const stride = 6 * 4 + 3; // six floats plus rgb bytes
  const dataStart = end + HEADER_END.length;
  if (bytes.length < dataStart + count * stride) {
    throw new Error("PLY payload truncated");
  }
  const view = new DataView(buffer, dataStart);
  const positions = new Float32Array(count * 3);
  const normals = new Float32Array(count * 3);
  const colors = new Float32Array(count * 3);
  for (let i = 0; i < count; i++) {
    const base = i * stride;
    positions[i * 3] = view.getFloat32(base, true);
    positions[i * 3 + 1] = view.getFloat32(base + 4, true);
    positions[i * 3 + 2] = view.getFloat32(base + 8, true);
    normals[i * 3] = view.getFloat32(base + 12, true);
    normals[i * 3 + 1] = view.getFloat32(base + 16, true);
    normals[i * 3 + 2] = view.getFloat32(base + 20, true);
    colors[i * 3] = view.getUint8(base + 24) / 255;
    colors[i * 3 + 1] = view.getUint8(base + 25) / 255;
    colors[i * 3 + 2] = view.getUint8(base + 26) / 255;
  }
  return { count, positions, normals, colors };
}

/** Pack a point cloud back into the same binary layout (used by tests). */
export function encodePly(cloud: PointCloud): ArrayBuffer {
  const header =
    "ply\nformat binary_little_endian 1.0\n" +
    `element vertex ${cloud.count}\n` +
    "property float x\nproperty float y\nproperty float z\n" +
    "property float nx\nproperty float ny\nproperty float nz\n" +
    "property uchar red\nproperty uchar green\nproperty uchar blue\n" +
    "end_header\n";
  const headerBytes = new TextEncoder().encode(header);
  const stride = 27;
  const out = new ArrayBuffer(headerBytes.length + cloud.count * stride);
  new Uint8Array(out).set(headerBytes, 0);
  const view = new DataView(out, headerBytes.length);
  for (let i = 0; i < cloud.count; i++) {
    const base = i * stride;
    view.setFloat32(base, cloud.positions[i * 3], true);
    view.setFloat32(base + 4, cloud.positions[i * 3 + 1], true);
    view.setFloat32(base + 8, cloud.positions[i * 3 + 2], true);
    view.setFloat32(base + 12, cloud.normals[i * 3], true);
    view.setFloat32(base + 16, cloud.normals[i * 3 + 1], true);
    view.setFloat32(base + 20, cloud.normals[i * 3 + 2], true);
    view.setUint8(base + 24, Math.round(cloud.colors[i * 3] * 255));
    view.setUint8(base + 25, Math.round(cloud.colors[i * 3 + 1] * 255));
    view.setUint8(base + 26, Math.round(cloud.colors[i * 3 + 2] * 255));
  }
  return out;
}
