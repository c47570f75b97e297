/** Wire objects of the annotation service (see GET /schemas on the server). */

export type QueryMode = "pixel" | "patch";

export interface QuerySet {
  image_index: number;
  mode: QueryMode;
  budget_b: number;
  /** [x, y] pairs; x is the column, y is the row */
  pixels: [number, number][];
  /** [cx, cy, side] triples */
  patches: [number, number, number][];
}

export interface AnnotationRecord {
  image_index: number;
  /** [x, y, class_index] triples */
  entries: [number, number, number][];
  source: "oracle" | "human";
}

export interface WindowLevel {
  low: number;
  high: number;
  center: number;
  width: number;
}

export interface SliceMeta {
  index: number;
  patient_id: string;
  slice_index: number;
  height: number;
  width: number;
  window_level: WindowLevel;
  png_base64: string;
  png_url: string;
  raw_url: string;
  truth_png_url?: string;
}

export interface PredictionMeta {
  index: number;
  png_base64: string;
  png_url: string;
}

export type SessionState =
  | "awaiting_batch"
  | "awaiting_annotations"
  | "adapting"
  | "finished";

export interface LossBreakdown {
  sup_loss: number | null;
  cont_loss: number;
  total: number;
  lambda: number;
  annotated_pixel_count: number;
}

export interface BatchPayload {
  batch_id: number | null;
  state: SessionState;
  K_effective?: number;
  selected_indices?: number[];
  querysets: QuerySet[];
  slices: SliceMeta[];
  predictions: PredictionMeta[];
  class_count?: number;
  class_names?: string[];
  losses?: LossBreakdown;
}

export interface SubmitResponse {
  status: "accepted" | "adapted";
  state: SessionState;
  pending_images?: number[];
  losses?: LossBreakdown;
  per_class_dsc?: Record<string, number> | null;
}

export interface SessionEvent {
  batch_id: number;
  cycle: number;
  batch_index: number;
  K_effective: number;
  selected_indices: number[];
  losses: LossBreakdown;
  per_class_dsc: Record<string, number> | null;
  per_class_dsc_post: Record<string, number> | null;
}

export interface MetricsPayload {
  session_id: string;
  state: SessionState;
  batches_done: number;
  events: SessionEvent[];
}

export interface SessionInfo {
  session_id: string;
  state: SessionState;
  total_batches: number;
  cycles: number;
}
