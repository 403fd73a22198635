/** DOM-free review session flow.
 *
 * Holds the queue, the cursor, and the decision pipeline. Decisions are
 * posted strictly in submission order; each carries a unique idempotency
 * token, so a network drop is survived by retrying the same token until the
 * service acknowledges it. The UI layer renders from this state and calls
 * accept()/correctWith()/move(); it never computes stats itself - every
 * number shown comes from the service's stats responses.
 */

import {
  ApiError,
  ConflictError,
  Decision,
  QueueItem,
  ReviewApi,
  Stats,
} from "./api.js";

export type Banner = "" | "offline" | "conflict";

export interface FlowDeps {
  api: ReviewApi;
  /** Millisecond clock for on-screen timing (performance.now in the browser). */
  now?: () => number;
  /** Unique idempotency token per decision attempt. */
  makeToken?: () => string;
  /** Backoff sleep between retries of a failed post. */
  sleep?: (ms: number) => Promise<void>;
  onChange?: () => void;
  reviewerId?: string;
}

const BINARY_PARSE = new Set(["0", "1"]);

interface PendingDecision {
  decision: Decision;
  resolve: () => void;
  reject: (err: unknown) => void;
}

export class ReviewFlow {
  items: QueueItem[] = [];
  position = 0;
  stats: Stats | null = null;
  banner: Banner = "";
  sessionId = "";
  runId = "";
  /** Sum of elapsed_ms this client has posted; kept only for test cross-checks. */
  postedElapsedMs = 0;

  private readonly api: ReviewApi;
  private readonly now: () => number;
  private readonly makeToken: () => string;
  private readonly sleep: (ms: number) => Promise<void>;
  private readonly onChange: () => void;
  private readonly reviewerId: string;
  private shownAt = 0;
  private queue: PendingDecision[] = [];
  private draining = false;

  constructor(deps: FlowDeps) {
    this.api = deps.api;
    this.now = deps.now ?? (() => performance.now());
    this.makeToken = deps.makeToken ?? (() => crypto.randomUUID());
    this.sleep = deps.sleep ?? ((ms) => new Promise((r) => setTimeout(r, ms)));
    this.onChange = deps.onChange ?? (() => {});
    this.reviewerId = deps.reviewerId ?? "reviewer";
  }

  /** Create a session over a run and load its queue. */
  async start(runId: string, task?: string): Promise<void> {
    this.runId = runId;
    const session = await this.api.createSession(runId, this.reviewerId);
    this.sessionId = session.session_id;
    await this.refresh(task);
    this.stats = await this.api.getStats(this.sessionId);
    this.seek(this.firstUndecided());
    this.onChange();
  }

  /** Resume an existing session (e.g. after a reload or service restart). */
  async resume(sessionId: string, task?: string): Promise<void> {
    const session = await this.api.getSession(sessionId);
    this.sessionId = session.session_id;
    this.runId = session.run_id;
    await this.refresh(task);
    this.stats = await this.api.getStats(this.sessionId);
    this.seek(this.firstUndecided());
    this.onChange();
  }

  /** Re-pull the queue; server state wins over optimistic marks. */
  async refresh(task?: string): Promise<void> {
    const page = await this.api.getQueue(this.runId, {
      task,
      session: this.sessionId,
      limit: 500,
    });
    this.items = page.items;
    this.onChange();
  }

  get current(): QueueItem | null {
    return this.items[this.position] ?? null;
  }

  get done(): boolean {
    return this.items.length > 0 && this.items.every((i) => i.decided);
  }

  firstUndecided(): number {
    const index = this.items.findIndex((i) => !i.decided);
    return index === -1 ? 0 : index;
  }

  seek(position: number): void {
    if (this.items.length === 0) return;
    this.position = Math.max(0, Math.min(position, this.items.length - 1));
    this.shownAt = this.now();
    this.onChange();
  }

  move(delta: number): void {
    this.seek(this.position + delta);
  }

  async accept(): Promise<void> {
    const item = this.current;
    if (!item || item.decided) return;
    await this.decide(item, { verdict: "accept" });
  }

  async correctWith(value: string): Promise<void> {
    const item = this.current;
    if (!item || item.decided) return;
    const corrected = this.normalizeCorrection(item, value);
    if (corrected === null) return;
    await this.decide(item, { verdict: "correct", corrected_value: corrected });
  }

  /** Free-text corrections are lowercased client-side to match the gold
   * label conventions; binary corrections must be 0 or 1. Returns null for
   * values the service would reject. */
  normalizeCorrection(item: QueueItem, value: string): string | null {
    const trimmed = value.trim();
    if (this.isBinary(item)) {
      return BINARY_PARSE.has(trimmed) ? trimmed : null;
    }
    const lowered = trimmed.toLowerCase();
    return lowered.length > 0 ? lowered : null;
  }

  isBinary(item: QueueItem): boolean {
    return item.task !== "generic_name" && item.task !== "generic_route";
  }

  private async decide(
    item: QueueItem,
    body: { verdict: "accept" | "correct"; corrected_value?: string },
  ): Promise<void> {
    const elapsed = Math.max(0, Math.round(this.now() - this.shownAt));
    const decision: Decision = {
      entry_id: item.entry_id,
      task: item.task,
      verdict: body.verdict,
      elapsed_ms: elapsed,
      decision_token: this.makeToken(),
      reviewer_id: this.reviewerId,
    };
    if (body.corrected_value !== undefined) {
      decision.corrected_value = body.corrected_value;
    }
    // Optimistic: mark and advance now, roll back from server state on conflict.
    item.decided = true;
    item.verdict = body.verdict;
    if (body.corrected_value !== undefined) item.corrected_value = body.corrected_value;
    this.seek(this.position + 1 < this.items.length ? this.position + 1 : this.position);
    await this.enqueue(decision);
  }

  private enqueue(decision: Decision): Promise<void> {
    const posted = new Promise<void>((resolve, reject) => {
      this.queue.push({ decision, resolve, reject });
    });
    void this.drain();
    return posted;
  }

  /** Post pending decisions one at a time, in order. A network failure
   * keeps the head of the queue and retries the same token with backoff. */
  private async drain(): Promise<void> {
    if (this.draining) return;
    this.draining = true;
    try {
      while (this.queue.length > 0) {
        const pending = this.queue[0];
        let backoff = 500;
        for (;;) {
          try {
            this.stats = await this.api.postDecision(this.sessionId, pending.decision);
            this.postedElapsedMs += pending.decision.elapsed_ms;
            if (this.banner === "offline") this.banner = "";
            pending.resolve();
            break;
          } catch (err) {
            if (err instanceof ConflictError) {
              // Someone (or an earlier retry) already decided this item:
              // server truth replaces the optimistic mark.
              this.banner = "conflict";
              await this.resync();
              pending.resolve();
              break;
            }
            if (err instanceof ApiError) {
              // Permanent rejection (e.g. validation): surface it and
              // let server state replace the optimistic mark.
              await this.resync();
              pending.reject(err);
              break;
            }
            // Network failure: keep the token, retry after backoff.
            this.banner = "offline";
            this.onChange();
            await this.sleep(backoff);
            backoff = Math.min(backoff * 2, 5000);
          }
        }
        this.queue.shift();
        this.onChange();
      }
    } finally {
      this.draining = false;
    }
  }

  private async resync(): Promise<void> {
    try {
      await this.refresh();
      this.stats = await this.api.getStats(this.sessionId);
    } catch {
      // still offline; the next drain round or user action will retry
    }
  }

  /** Number of decisions accepted locally but not yet acknowledged. */
  get pendingCount(): number {
    return this.queue.length;
  }

  async promote(task: string): Promise<number> {
    const result = await this.api.promote(this.sessionId, task);
    return result.appended;
  }
}
