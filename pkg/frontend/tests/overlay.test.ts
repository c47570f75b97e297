import { describe, expect, it } from "vitest";

import {
  ViewTransform,
  canvasToImage,
  clampPan,
  hitTest,
  imageToCanvas,
  markerBoxes,
} from "../src/overlay";
import { unitsOf } from "../src/state";
import type { QuerySet } from "../src/types";

describe("coordinate transforms", () => {
  it("canvasToImage inverts imageToCanvas exactly at any zoom and pan", () => {
    const zooms = [1, 2, 3, 5.5, 6, 7.25, 11, 16];
    const pans = [0, -37.5, 12.25, 101];
    for (const zoom of zooms) {
      for (const panX of pans) {
        for (const panY of pans) {
          const t: ViewTransform = { zoom, panX, panY };
          for (let x = 0; x < 32; x += 3) {
            for (let y = 0; y < 32; y += 3) {
              const { cx, cy } = imageToCanvas(t, x, y);
              const back = canvasToImage(t, cx, cy);
              expect(back).toEqual({ x, y });
            }
          }
        }
      }
    }
  });

  it("every canvas point inside a pixel cell maps to that pixel", () => {
    const t: ViewTransform = { zoom: 8, panX: 5, panY: -3 };
    for (const [fx, fy] of [[0.01, 0.01], [0.99, 0.01], [0.5, 0.5], [0.01, 0.99]]) {
      const cx = (10 + fx) * t.zoom + t.panX;
      const cy = (20 + fy) * t.zoom + t.panY;
      expect(canvasToImage(t, cx, cy)).toEqual({ x: 10, y: 20 });
    }
  });
});

describe("markers and hit testing", () => {
  const pixelUnits = unitsOf({
    image_index: 0, mode: "pixel", budget_b: 1,
    pixels: [[4, 6], [20, 2]], patches: [],
  } as QuerySet);
  const patchUnits = unitsOf({
    image_index: 0, mode: "patch", budget_b: 1,
    pixels: [], patches: [[10, 10, 5]],
  } as QuerySet);

  it("marker boxes cover exactly the queried footprint", () => {
    const t: ViewTransform = { zoom: 4, panX: 0, panY: 0 };
    const [box] = markerBoxes(t, patchUnits);
    expect(box.size).toBe(5 * 4);
    // top-left corner of the patch (center 10,10, side 5 -> starts at 8,8)
    expect(box.left).toBe(8 * 4);
    expect(box.top).toBe(8 * 4);
    expect(box.kind).toBe("patch");
    const [pix] = markerBoxes(t, pixelUnits);
    expect(pix.size).toBe(4);
    expect(pix.kind).toBe("pixel");
  });

  it("clicking inside a marker returns its unit index", () => {
    const t: ViewTransform = { zoom: 6, panX: 11, panY: -4 };
    const { cx, cy } = imageToCanvas(t, 20, 2);
    expect(hitTest(t, pixelUnits, cx, cy)).toBe(1);
    const corner = imageToCanvas(t, 8, 12); // patch corner pixel
    expect(hitTest(t, patchUnits, corner.cx, corner.cy)).toBe(0);
    const miss = imageToCanvas(t, 0, 0);
    expect(hitTest(t, pixelUnits, miss.cx, miss.cy)).toBeNull();
  });
});

describe("pan clamping", () => {
  it("keeps a small image inside the canvas", () => {
    const t = clampPan({ zoom: 4, panX: 999, panY: -999 }, 32, 32, 512, 512);
    expect(t.panX).toBeLessThanOrEqual(512 - 32 * 4);
    expect(t.panY).toBeGreaterThanOrEqual(0);
  });

  it("lets a large image pan but not detach", () => {
    const t = clampPan({ zoom: 16, panX: -99999, panY: 99999 }, 64, 64, 512, 512);
    expect(t.panX).toBe(512 - 64 * 16);
    expect(t.panY).toBe(0);
  });
});
