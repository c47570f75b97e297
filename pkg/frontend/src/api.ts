/** Thin typed client over the annotation service HTTP API. */

import type {
  AnnotationRecord,
  BatchPayload,
  MetricsPayload,
  SessionInfo,
  SubmitResponse,
} from "./types";

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function asJson<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = await resp.json();
      if (body && typeof body.detail === "string") detail = body.detail;
    } catch {
      /* non-JSON error body */
    }
    throw new ApiError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export class ServiceClient {
  constructor(
    private baseUrl: string = "",
    private fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async createSession(config: object): Promise<SessionInfo> {
    const resp = await this.fetchImpl(this.url("/sessions"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(config),
    });
    return asJson<SessionInfo>(resp);
  }

  async nextBatch(sessionId: string): Promise<BatchPayload> {
    const resp = await this.fetchImpl(
      this.url(`/sessions/${sessionId}/next-batch`),
    );
    return asJson<BatchPayload>(resp);
  }

  async submitAnnotations(
    sessionId: string,
    batchId: number,
    records: AnnotationRecord[],
    finalize = false,
  ): Promise<SubmitResponse> {
    const resp = await this.fetchImpl(
      this.url(`/sessions/${sessionId}/batches/${batchId}/annotations`),
      {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ records, finalize }),
      },
    );
    return asJson<SubmitResponse>(resp);
  }

  async metrics(sessionId: string): Promise<MetricsPayload> {
    const resp = await this.fetchImpl(this.url(`/sessions/${sessionId}/metrics`));
    return asJson<MetricsPayload>(resp);
  }
}
