/**
 * Client-side annotation state for one batch.
 *
 * Every query location is a "unit" (a single pixel or a whole patch) that the
 * expert assigns one class to. Records are constructed from the query sets
 * themselves, so a submission can never contain an off-query coordinate.
 * Submission is allowed only when every queried image is either fully
 * assigned or explicitly skipped.
 */

import type { AnnotationRecord, BatchPayload, QuerySet } from "./types";

export interface QueryUnit {
  /** anchor coordinate: the pixel itself, or the patch center */
  x: number;
  y: number;
  side: number; // 1 for pixel queries
  chosenClass: number | null;
}

export interface ImageAnnotation {
  imageIndex: number;
  mode: "pixel" | "patch";
  units: QueryUnit[];
  skipped: boolean;
}

export interface OverlayToggles {
  prediction: boolean;
  queries: boolean;
  truth: boolean;
}

export class ViewState {
  sessionId: string;
  batchId: number | null;
  images: Map<number, ImageAnnotation> = new Map();
  toggles: OverlayToggles = { prediction: true, queries: true, truth: false };
  activeClass = 1;
  windowCenter = 0.5;
  windowWidth = 1.0;

  constructor(sessionId: string, payload: BatchPayload) {
    this.sessionId = sessionId;
    this.batchId = payload.batch_id;
    for (const qs of payload.querysets) {
      this.images.set(qs.image_index, {
        imageIndex: qs.image_index,
        mode: qs.mode,
        units: unitsOf(qs),
        skipped: false,
      });
    }
  }

  assign(imageIndex: number, unitIndex: number, cls: number): void {
    const img = this.images.get(imageIndex);
    if (!img) throw new Error(`image ${imageIndex} has no queries`);
    if (unitIndex < 0 || unitIndex >= img.units.length) {
      throw new Error(`no query unit ${unitIndex} in image ${imageIndex}`);
    }
    img.units[unitIndex].chosenClass = cls;
    img.skipped = false;
  }

  /** Cycle the unit's class: unset -> 0 -> 1 -> ... -> C-1 -> unset. */
  cycle(imageIndex: number, unitIndex: number, classCount: number): void {
    const img = this.images.get(imageIndex);
    if (!img) throw new Error(`image ${imageIndex} has no queries`);
    const unit = img.units[unitIndex];
    if (unit.chosenClass === null) unit.chosenClass = 0;
    else if (unit.chosenClass >= classCount - 1) unit.chosenClass = null;
    else unit.chosenClass += 1;
  }

  /** Bulk action: assign `cls` to every still-unset unit of the image. */
  applyToRemaining(imageIndex: number, cls: number): void {
    const img = this.images.get(imageIndex);
    if (!img) throw new Error(`image ${imageIndex} has no queries`);
    for (const unit of img.units) {
      if (unit.chosenClass === null) unit.chosenClass = cls;
    }
    img.skipped = false;
  }

  skip(imageIndex: number): void {
    const img = this.images.get(imageIndex);
    if (!img) throw new Error(`image ${imageIndex} has no queries`);
    img.skipped = true;
  }

  imageComplete(imageIndex: number): boolean {
    const img = this.images.get(imageIndex);
    if (!img) return true;
    return img.skipped || img.units.every((u) => u.chosenClass !== null);
  }

  /** The submit button's enabled state. */
  submittable(): boolean {
    for (const img of this.images.values()) {
      if (!this.imageComplete(img.imageIndex)) return false;
    }
    return true;
  }

  /** True when some image was skipped: submission must set finalize. */
  needsFinalize(): boolean {
    for (const img of this.images.values()) {
      if (img.skipped) return true;
    }
    return false;
  }

  /** Records for all fully annotated, non-skipped images. */
  buildRecords(): AnnotationRecord[] {
    if (!this.submittable()) {
      throw new Error("completion rule not met: assign or skip every query");
    }
    const records: AnnotationRecord[] = [];
    for (const img of this.images.values()) {
      if (img.skipped) continue;
      const entries: [number, number, number][] = [];
      for (const unit of img.units) {
        const cls = unit.chosenClass as number;
        if (unit.side === 1) {
          entries.push([unit.x, unit.y, cls]);
        } else {
          const r = Math.floor(unit.side / 2);
          for (let yy = unit.y - r; yy <= unit.y + r; yy++) {
            for (let xx = unit.x - r; xx <= unit.x + r; xx++) {
              entries.push([xx, yy, cls]);
            }
          }
        }
      }
      records.push({ image_index: img.imageIndex, entries, source: "human" });
    }
    return records;
  }

  progress(): { assigned: number; total: number } {
    let assigned = 0;
    let total = 0;
    for (const img of this.images.values()) {
      if (img.skipped) continue;
      total += img.units.length;
      assigned += img.units.filter((u) => u.chosenClass !== null).length;
    }
    return { assigned, total };
  }
}

export function unitsOf(qs: QuerySet): QueryUnit[] {
  if (qs.mode === "pixel") {
    return qs.pixels.map(([x, y]) => ({ x, y, side: 1, chosenClass: null }));
  }
  return qs.patches.map(([cx, cy, side]) => ({
    x: cx,
    y: cy,
    side,
    chosenClass: null,
  }));
}
