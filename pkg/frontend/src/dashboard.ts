/** Series extraction for the per-batch loss / DSC dashboard. */

import type { SessionEvent } from "./types";

export interface SeriesPoint {
  batch: number;
  value: number;
}

export interface DashboardData {
  totalLoss: SeriesPoint[];
  supLoss: SeriesPoint[];
  contLoss: SeriesPoint[];
  /** present only when the stream carries ground truth */
  meanDsc: SeriesPoint[] | null;
  annotatedPixels: number;
}

export function meanForegroundDsc(perClass: Record<string, number>): number {
  const vals = Object.entries(perClass)
    .filter(([c]) => c !== "0")
    .map(([, v]) => v);
  if (vals.length === 0) return NaN;
  return (100 * vals.reduce((a, b) => a + b, 0)) / vals.length;
}

export function buildDashboard(events: SessionEvent[]): DashboardData {
  const totalLoss: SeriesPoint[] = [];
  const supLoss: SeriesPoint[] = [];
  const contLoss: SeriesPoint[] = [];
  const meanDsc: SeriesPoint[] = [];
  let annotated = 0;
  for (let i = 0; i < events.length; i++) {
    const ev = events[i];
    const batch = i + 1;
    totalLoss.push({ batch, value: ev.losses.total });
    if (ev.losses.sup_loss !== null) {
      supLoss.push({ batch, value: ev.losses.sup_loss });
    }
    contLoss.push({ batch, value: ev.losses.cont_loss });
    annotated += ev.losses.annotated_pixel_count;
    if (ev.per_class_dsc) {
      meanDsc.push({ batch, value: meanForegroundDsc(ev.per_class_dsc) });
    }
  }
  return {
    totalLoss,
    supLoss,
    contLoss,
    meanDsc: meanDsc.length > 0 ? meanDsc : null,
    annotatedPixels: annotated,
  };
}

/** Simple polyline path for an inline SVG chart. */
export function polylinePath(
  points: SeriesPoint[],
  width: number,
  height: number,
): string {
  if (points.length === 0) return "";
  const xs = points.map((p) => p.batch);
  const ys = points.map((p) => p.value);
  const xMin = Math.min(...xs);
  const xMax = Math.max(...xs);
  const yMin = Math.min(...ys);
  const yMax = Math.max(...ys);
  const sx = (x: number) =>
    xMax === xMin ? width / 2 : ((x - xMin) / (xMax - xMin)) * width;
  const sy = (y: number) =>
    yMax === yMin ? height / 2 : height - ((y - yMin) / (yMax - yMin)) * height;
  return points
    .map((p, i) => `${i === 0 ? "M" : "L"}${sx(p.batch).toFixed(1)},${sy(p.value).toFixed(1)}`)
    .join(" ");
}
