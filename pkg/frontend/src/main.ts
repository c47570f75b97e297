/**
 * Browser entry: wires the service client, per-batch annotation state and the
 * canvas viewer together. One session per page.
 */

import { ApiError, ServiceClient } from "./api";
import { buildDashboard, polylinePath } from "./dashboard";
import {
  ViewTransform,
  canvasToImage,
  clampPan,
  hitTest,
  imageToCanvas,
  markerBoxes,
} from "./overlay";
import { ViewState } from "./state";
import type { BatchPayload, SessionEvent } from "./types";

const PALETTE = [
  "#000000", "#d62728", "#2ca02c", "#1f77b4", "#ff7f0e",
  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
];

interface AppState {
  client: ServiceClient;
  sessionId: string | null;
  payload: BatchPayload | null;
  view: ViewState | null;
  imageIndex: number; // currently displayed slice (index within batch)
  transform: ViewTransform;
  classCount: number;
  classNames: string[];
  sliceImages: Map<number, HTMLImageElement>;
  predImages: Map<number, HTMLImageElement>;
  truthImages: Map<number, HTMLImageElement>;
  finished: boolean;
}

const app: AppState = {
  client: new ServiceClient(""),
  sessionId: null,
  payload: null,
  view: null,
  imageIndex: 0,
  transform: { zoom: 6, panX: 0, panY: 0 },
  classCount: 5,
  classNames: [],
  sliceImages: new Map(),
  predImages: new Map(),
  truthImages: new Map(),
  finished: false,
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function setBanner(text: string, kind: "info" | "error" = "info"): void {
  const banner = el<HTMLDivElement>("banner");
  banner.textContent = text;
  banner.className = kind;
}

async function loadImage(src: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => reject(new Error(`cannot load ${src}`));
    img.src = src;
  });
}

async function createSession(): Promise<void> {
  const configText = el<HTMLTextAreaElement>("session-config").value;
  let config: object;
  try {
    config = JSON.parse(configText);
  } catch (e) {
    setBanner(`config is not valid JSON: ${e}`, "error");
    return;
  }
  try {
    const info = await app.client.createSession(config);
    app.sessionId = info.session_id;
    app.finished = false;
    setBanner(`session ${info.session_id.slice(0, 8)} created; `
      + `${info.total_batches} batches x ${info.cycles} cycle(s)`);
    el<HTMLButtonElement>("next-batch").disabled = false;
    await pullNextBatch();
  } catch (e) {
    setBanner(e instanceof ApiError ? e.message : String(e), "error");
  }
}

async function pullNextBatch(): Promise<void> {
  if (!app.sessionId) return;
  let payload: BatchPayload;
  try {
    payload = await app.client.nextBatch(app.sessionId);
  } catch (e) {
    setBanner(e instanceof ApiError ? e.message : String(e), "error");
    return;
  }
  if (payload.state === "finished" && payload.batch_id === null) {
    app.finished = true;
    setBanner("stream finished");
    el<HTMLButtonElement>("next-batch").disabled = true;
    await refreshDashboard();
    return;
  }
  app.payload = payload;
  app.classCount = payload.class_count ?? app.classCount;
  app.classNames = payload.class_names ?? [];
  app.view = new ViewState(app.sessionId, payload);
  app.imageIndex = payload.querysets.length > 0
    ? payload.querysets[0].image_index : 0;
  app.sliceImages.clear();
  app.predImages.clear();
  app.truthImages.clear();
  for (const meta of payload.slices) {
    app.sliceImages.set(
      meta.index, await loadImage(`data:image/png;base64,${meta.png_base64}`));
    if (meta.truth_png_url) {
      app.truthImages.set(meta.index, await loadImage(meta.truth_png_url));
    }
  }
  for (const pred of payload.predictions) {
    app.predImages.set(
      pred.index, await loadImage(`data:image/png;base64,${pred.png_base64}`));
  }
  if (payload.querysets.length === 0) {
    // K decayed to zero: the server already adapted, nothing to annotate
    setBanner("no annotation needed for this batch (K collapsed); advancing");
    await refreshDashboard();
    window.setTimeout(() => void pullNextBatch(), 400);
    renderAll();
    return;
  }
  setBanner(`batch ${payload.batch_id}: ${payload.querysets.length} image(s) `
    + "selected for annotation");
  renderAll();
}

function currentUnits() {
  if (!app.view) return [];
  const img = app.view.images.get(app.imageIndex);
  return img ? img.units : [];
}

function renderCanvas(): void {
  const canvas = el<HTMLCanvasElement>("viewer");
  const ctx = canvas.getContext("2d");
  if (!ctx || !app.payload) return;
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const slice = app.sliceImages.get(app.imageIndex);
  if (!slice) return;
  const t = app.transform;
  ctx.save();
  ctx.translate(t.panX, t.panY);
  ctx.scale(t.zoom, t.zoom);
  // client-side window level on top of the server's percentile windowing
  const view = app.view;
  if (view) {
    const brightness = 0.5 + view.windowCenter; // 0.5..1.5 around neutral 1.0
    const contrast = Math.max(view.windowWidth, 0.05);
    ctx.filter = `brightness(${brightness}) contrast(${1 / contrast})`;
  }
  ctx.drawImage(slice, 0, 0);
  ctx.filter = "none";
  const toggles = app.view?.toggles;
  if (toggles?.prediction) {
    const pred = app.predImages.get(app.imageIndex);
    if (pred) {
      ctx.globalAlpha = 0.35;
      ctx.drawImage(pred, 0, 0);
      ctx.globalAlpha = 1.0;
    }
  }
  if (toggles?.truth) {
    const truth = app.truthImages.get(app.imageIndex);
    if (truth) {
      ctx.globalAlpha = 0.3;
      ctx.drawImage(truth, 0, 0);
      ctx.globalAlpha = 1.0;
    }
  }
  ctx.restore();

  if (toggles?.queries) {
    for (const box of markerBoxes(t, currentUnits())) {
      const unit = currentUnits()[box.unitIndex];
      ctx.lineWidth = 2;
      ctx.strokeStyle = unit.chosenClass === null
        ? "#ffff00"
        : PALETTE[unit.chosenClass % PALETTE.length];
      ctx.strokeRect(box.left, box.top, box.size, box.size);
      if (unit.chosenClass !== null) {
        ctx.fillStyle = ctx.strokeStyle + "55";
        ctx.fillRect(box.left, box.top, box.size, box.size);
      }
    }
  }
}

function renderPalette(): void {
  const host = el<HTMLDivElement>("palette");
  host.innerHTML = "";
  for (let c = 0; c < app.classCount; c++) {
    const btn = document.createElement("button");
    btn.textContent = `${c}${app.classNames[c] ? " " + app.classNames[c] : ""}`;
    btn.style.borderColor = PALETTE[c % PALETTE.length];
    btn.className = app.view && c === app.view.activeClass ? "active" : "";
    btn.onclick = () => {
      if (app.view) app.view.activeClass = c;
      renderPalette();
    };
    host.appendChild(btn);
  }
}

function renderImageTabs(): void {
  const host = el<HTMLDivElement>("image-tabs");
  host.innerHTML = "";
  if (!app.payload || !app.view) return;
  for (const qs of app.payload.querysets) {
    const btn = document.createElement("button");
    const done = app.view.imageComplete(qs.image_index);
    btn.textContent = `image ${qs.image_index}${done ? " ✓" : ""}`;
    btn.className = qs.image_index === app.imageIndex ? "active" : "";
    btn.onclick = () => {
      app.imageIndex = qs.image_index;
      renderAll();
    };
    host.appendChild(btn);
  }
}

function renderControls(): void {
  const view = app.view;
  const progress = el<HTMLSpanElement>("progress");
  const submit = el<HTMLButtonElement>("submit");
  if (!view || !app.payload) {
    progress.textContent = "";
    submit.disabled = true;
    return;
  }
  const p = view.progress();
  progress.textContent = `${p.assigned}/${p.total} queries labeled`;
  submit.disabled = !view.submittable();
  submit.textContent = view.needsFinalize() ? "Submit (partial)" : "Submit";
}

function renderAll(): void {
  renderCanvas();
  renderPalette();
  renderImageTabs();
  renderControls();
}

async function refreshDashboard(): Promise<void> {
  if (!app.sessionId) return;
  const metrics = await app.client.metrics(app.sessionId);
  const data = buildDashboard(metrics.events as SessionEvent[]);
  el<HTMLSpanElement>("dash-summary").textContent =
    `${metrics.batches_done} batches, ${data.annotatedPixels} px annotated`;
  const lossPath = el<SVGPathElement & HTMLElement>("loss-path");
  lossPath.setAttribute("d", polylinePath(data.totalLoss, 280, 60));
  const dscPath = el<SVGPathElement & HTMLElement>("dsc-path");
  const dscLabel = el<HTMLSpanElement>("dsc-label");
  if (data.meanDsc) {
    dscPath.setAttribute("d", polylinePath(data.meanDsc, 280, 60));
    dscLabel.textContent =
      `mean DSC ${data.meanDsc[data.meanDsc.length - 1].value.toFixed(1)}`;
  } else {
    dscPath.setAttribute("d", "");
    dscLabel.textContent = "no ground truth in stream";
  }
}

async function submit(): Promise<void> {
  if (!app.view || !app.sessionId || app.payload?.batch_id == null) return;
  let records;
  try {
    records = app.view.buildRecords();
  } catch (e) {
    setBanner(String(e), "error");
    return;
  }
  try {
    const resp = await app.client.submitAnnotations(
      app.sessionId, app.payload.batch_id, records, app.view.needsFinalize());
    if (resp.status === "adapted" && resp.losses) {
      const sup = resp.losses.sup_loss;
      setBanner(`model updated: total loss ${resp.losses.total.toFixed(4)}`
        + (sup !== null ? ` (supervised ${sup.toFixed(4)})` : ""));
      await refreshDashboard();
      await pullNextBatch();
    } else {
      setBanner(`accepted; still pending: ${resp.pending_images?.join(", ")}`);
    }
  } catch (e) {
    setBanner(e instanceof ApiError ? e.message : String(e), "error");
  }
}

function onCanvasClick(ev: MouseEvent): void {
  if (!app.view) return;
  const canvas = el<HTMLCanvasElement>("viewer");
  const rect = canvas.getBoundingClientRect();
  const cx = ev.clientX - rect.left;
  const cy = ev.clientY - rect.top;
  const hit = hitTest(app.transform, currentUnits(), cx, cy);
  if (hit === null) return;
  if (ev.shiftKey) {
    app.view.cycle(app.imageIndex, hit, app.classCount);
  } else {
    app.view.assign(app.imageIndex, hit, app.view.activeClass);
  }
  renderAll();
}

export function wireUp(): void {
  el<HTMLButtonElement>("create-session").onclick = () => void createSession();
  el<HTMLButtonElement>("next-batch").onclick = () => void pullNextBatch();
  el<HTMLButtonElement>("submit").onclick = () => void submit();
  el<HTMLButtonElement>("apply-remaining").onclick = () => {
    if (app.view) {
      app.view.applyToRemaining(app.imageIndex, app.view.activeClass);
      renderAll();
    }
  };
  el<HTMLButtonElement>("skip-image").onclick = () => {
    if (app.view) {
      app.view.skip(app.imageIndex);
      renderAll();
    }
  };
  el<HTMLInputElement>("toggle-pred").onchange = (e) => {
    if (app.view) {
      app.view.toggles.prediction = (e.target as HTMLInputElement).checked;
      renderCanvas();
    }
  };
  el<HTMLInputElement>("toggle-queries").onchange = (e) => {
    if (app.view) {
      app.view.toggles.queries = (e.target as HTMLInputElement).checked;
      renderCanvas();
    }
  };
  el<HTMLInputElement>("toggle-truth").onchange = (e) => {
    if (app.view) {
      app.view.toggles.truth = (e.target as HTMLInputElement).checked;
      renderCanvas();
    }
  };
  el<HTMLInputElement>("zoom").oninput = (e) => {
    const zoom = Number((e.target as HTMLInputElement).value);
    const meta = app.payload?.slices[app.imageIndex];
    const canvas = el<HTMLCanvasElement>("viewer");
    app.transform = clampPan(
      { ...app.transform, zoom },
      meta?.width ?? 64, meta?.height ?? 64, canvas.width, canvas.height);
    renderCanvas();
  };
  el<HTMLInputElement>("level-center").oninput = (e) => {
    if (app.view) {
      app.view.windowCenter = Number((e.target as HTMLInputElement).value);
      renderCanvas();
    }
  };
  el<HTMLInputElement>("level-width").oninput = (e) => {
    if (app.view) {
      app.view.windowWidth = Number((e.target as HTMLInputElement).value);
      renderCanvas();
    }
  };
  el<HTMLCanvasElement>("viewer").onclick = onCanvasClick;
}

if (typeof document !== "undefined" && document.getElementById("viewer")) {
  wireUp();
}
