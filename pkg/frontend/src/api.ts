/** Typed client for the review service HTTP API. */

export interface RunInfo {
  run_id: string;
  model_id: string;
  tasks: string[];
  total_items: number;
}

export interface QueueItem {
  index: number;
  entry_id: string;
  drug_raw: string;
  route_raw: string;
  task: string;
  task_definition: string;
  parsed: string | number | null;
  raw_output: string;
  valid: boolean;
  decided: boolean;
  verdict: string | null;
  corrected_value: string | number | null;
}

export interface QueuePage {
  items: QueueItem[];
  cursor: number;
  total: number;
}

export interface GroupStats {
  items: number;
  corrections: number;
  review_ms: number;
}

export interface Stats {
  session_id: string;
  run_id: string;
  total_items: number;
  reviewed: number;
  corrections: number;
  review_ms: number;
  groups: Record<string, GroupStats>;
  savings: Record<string, number | null>;
  savings_defined: boolean;
  server_receipt_span_ms: number;
}

export interface SessionInfo {
  session_id: string;
  run_id: string;
  reviewer_id: string;
  started_at: string;
}

export interface Decision {
  entry_id: string;
  task: string;
  verdict: "accept" | "correct";
  corrected_value?: string | number;
  elapsed_ms: number;
  decision_token: string;
  reviewer_id?: string;
}

/** Item already decided under a different token. */
export class ConflictError extends Error {}

/** Non-conflict HTTP failure (4xx/5xx). */
export class ApiError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
  }
}

export type FetchLike = typeof fetch;

export class ReviewApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`, init);
    if (response.status === 409) {
      throw new ConflictError(await response.text());
    }
    if (!response.ok) {
      throw new ApiError(await response.text(), response.status);
    }
    return (await response.json()) as T;
  }

  listRuns(): Promise<RunInfo[]> {
    return this.request<RunInfo[]>("/runs");
  }

  getQueue(
    runId: string,
    opts: { task?: string; cursor?: number; limit?: number; session?: string } = {},
  ): Promise<QueuePage> {
    const params = new URLSearchParams();
    if (opts.task) params.set("task", opts.task);
    params.set("cursor", String(opts.cursor ?? 0));
    params.set("limit", String(opts.limit ?? 500));
    if (opts.session) params.set("session", opts.session);
    return this.request<QueuePage>(`/runs/${runId}/queue?${params}`);
  }

  createSession(runId: string, reviewerId = "reviewer"): Promise<SessionInfo> {
    return this.request<SessionInfo>("/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ run_id: runId, reviewer_id: reviewerId }),
    });
  }

  getSession(sessionId: string): Promise<SessionInfo & { decisions: number }> {
    return this.request(`/sessions/${sessionId}`);
  }

  postDecision(sessionId: string, decision: Decision): Promise<Stats> {
    return this.request<Stats>(`/sessions/${sessionId}/decisions`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(decision),
    });
  }

  getStats(sessionId: string): Promise<Stats> {
    return this.request<Stats>(`/sessions/${sessionId}/stats`);
  }

  promote(sessionId: string, task: string): Promise<{ task: string; appended: number }> {
    return this.request(`/sessions/${sessionId}/promote?task=${encodeURIComponent(task)}`, {
      method: "POST",
    });
  }
}
