/**
 * Canvas coordinate transforms and query-marker geometry.
 *
 * Image coordinates are integer pixel indices (x = column, y = row). The
 * canvas shows the image scaled by an integer-or-fractional zoom plus a pan
 * offset; the transforms here are exact inverses on pixel centers for every
 * zoom > 0, which is what keeps submitted coordinates identical to the
 * queried ones regardless of the viewer's zoom state.
 */

import type { QueryUnit } from "./state";

export interface ViewTransform {
  zoom: number; // canvas pixels per image pixel
  panX: number;
  panY: number;
}

export function imageToCanvas(
  t: ViewTransform,
  x: number,
  y: number,
): { cx: number; cy: number } {
  return {
    cx: (x + 0.5) * t.zoom + t.panX,
    cy: (y + 0.5) * t.zoom + t.panY,
  };
}

export function canvasToImage(
  t: ViewTransform,
  cx: number,
  cy: number,
): { x: number; y: number } {
  return {
    x: Math.floor((cx - t.panX) / t.zoom),
    y: Math.floor((cy - t.panY) / t.zoom),
  };
}

export interface MarkerBox {
  left: number;
  top: number;
  size: number;
  unitIndex: number;
  kind: "pixel" | "patch";
}

/** Axis-aligned canvas boxes marking each query unit. */
export function markerBoxes(t: ViewTransform, units: QueryUnit[]): MarkerBox[] {
  return units.map((u, i) => {
    const side = u.side;
    const r = Math.floor(side / 2);
    const { cx, cy } = imageToCanvas(t, u.x - r, u.y - r);
    return {
      left: cx - 0.5 * t.zoom,
      top: cy - 0.5 * t.zoom,
      size: side * t.zoom,
      unitIndex: i,
      kind: side === 1 ? "pixel" : "patch",
    };
  });
}

/** The query unit whose footprint contains the canvas point, if any. */
export function hitTest(
  t: ViewTransform,
  units: QueryUnit[],
  cx: number,
  cy: number,
): number | null {
  const { x, y } = canvasToImage(t, cx, cy);
  for (let i = 0; i < units.length; i++) {
    const u = units[i];
    const r = Math.floor(u.side / 2);
    if (x >= u.x - r && x <= u.x + r && y >= u.y - r && y <= u.y + r) {
      return i;
    }
  }
  return null;
}

/** Clamp pan so the image cannot be dragged fully out of view. */
export function clampPan(
  t: ViewTransform,
  imageW: number,
  imageH: number,
  canvasW: number,
  canvasH: number,
): ViewTransform {
  const clamp = (v: number, span: number, canvasSpan: number) => {
    const lower = Math.min(0, canvasSpan - span);
    const upper = Math.max(0, canvasSpan - span);
    return Math.min(Math.max(v, lower), upper);
  };
  return {
    zoom: t.zoom,
    panX: clamp(t.panX, imageW * t.zoom, canvasW),
    panY: clamp(t.panY, imageH * t.zoom, canvasH),
  };
}
