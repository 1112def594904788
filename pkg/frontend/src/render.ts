// Pure slice rendering: payload -> RGBA pixels, plus the crosshair readout.
// Kept canvas-free so the mapping is unit-testable.

import type { SlicePayload } from "./api.js";

export type Rgba = [number, number, number, number];

/**
 * Diverging blue-white-red colormap centered at zero. `limit` is the
 * symmetric display bound (max |value| by default).
 */
export function divergingColor(value: number, limit: number): Rgba {
  if (limit <= 0) return [255, 255, 255, 255];
  const t = Math.max(-1, Math.min(1, value / limit));
  if (t >= 0) {
    const s = 1 - t;
    return [255, Math.round(255 * s), Math.round(255 * s), 255];
  }
  const s = 1 + t;
  return [Math.round(255 * s), Math.round(255 * s), 255, 255];
}

/** Grayscale background scale over the payload's value range. */
export function grayscaleColor(value: number, lo: number, hi: number): Rgba {
  const span = hi - lo;
  const t = span > 0 ? (value - lo) / span : 0.5;
  const g = Math.round(255 * Math.max(0, Math.min(1, t)));
  return [g, g, g, 255];
}

export type RenderOptions = {
  threshold: number; // overlay transparent where |value| < threshold
  limit?: number; // symmetric color bound; defaults to max |range|
};

/**
 * Rasterize a slice to row-major RGBA. Cells outside the mask are fully
 * transparent; in-mask cells below threshold keep a grayscale background
 * so anatomy-free context remains visible.
 */
export function renderSlice(payload: SlicePayload, options: RenderOptions): Uint8ClampedArray {
  const [rows, cols] = payload.shape;
  const limit =
    options.limit ?? Math.max(Math.abs(payload.range[0]), Math.abs(payload.range[1]));
  const pixels = new Uint8ClampedArray(rows * cols * 4);
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      const value = payload.data[r][c];
      const at = (r * cols + c) * 4;
      if (value === null) continue; // transparent outside the mask
      let color: Rgba;
      if (Math.abs(value) < options.threshold) {
        color = grayscaleColor(value, payload.range[0], payload.range[1]);
        color[3] = 96; // dimmed background under the overlay
      } else {
        color = divergingColor(value, limit);
      }
      pixels[at] = color[0];
      pixels[at + 1] = color[1];
      pixels[at + 2] = color[2];
      pixels[at + 3] = color[3];
    }
  }
  return pixels;
}

/** True when the overlay at (r, c) is shown (in mask and at/above threshold). */
export function overlayVisible(payload: SlicePayload, r: number, c: number, threshold: number): boolean {
  const value = payload.data[r][c];
  return value !== null && Math.abs(value) >= threshold;
}

export type Readout = {
  voxel: [number, number, number];
  world: [number, number, number];
  value: number | null;
  unit: string;
};

const AXIS_INDEX = { sagittal: 0, coronal: 1, axial: 2 } as const;

/**
 * Crosshair readout at an in-plane position. The displayed value is the
 * payload cell itself; world coordinates come from the affine.
 */
export function crosshairReadout(payload: SlicePayload, r: number, c: number): Readout {
  const fixed = AXIS_INDEX[payload.axis];
  const voxel: [number, number, number] = [0, 0, 0];
  voxel[fixed] = payload.index;
  const free = [0, 1, 2].filter((a) => a !== fixed);
  voxel[free[0]] = r;
  voxel[free[1]] = c;

  const A = payload.affine;
  const world: [number, number, number] = [0, 0, 0];
  for (let i = 0; i < 3; i++) {
    world[i] = A[i][0] * voxel[0] + A[i][1] * voxel[1] + A[i][2] * voxel[2] + A[i][3];
  }
  return { voxel, world, value: payload.data[r][c], unit: payload.unit };
}
