/** DOM rendering for the review flow: one item per screen plus a stats
 * panel. All numbers in the panel come from the service's stats payload. */

import { QueueItem, Stats } from "./api.js";
import { ReviewFlow } from "./controller.js";

function el(tag: string, className: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function formatSeconds(ms: number): string {
  const total = Math.round(ms / 1000);
  const minutes = Math.floor(total / 60);
  const seconds = total % 60;
  return `${minutes}:${String(seconds).padStart(2, "0")}`;
}

export class ReviewView {
  editing = false;

  constructor(
    private readonly root: HTMLElement,
    private readonly flow: ReviewFlow,
  ) {}

  render(): void {
    this.root.replaceChildren();
    this.root.appendChild(this.bannerBar());
    const item = this.flow.current;
    if (!item) {
      this.root.appendChild(el("p", "empty", "No items to review."));
      return;
    }
    this.root.appendChild(this.card(item));
    this.root.appendChild(this.statsPanel(this.flow.stats));
    this.root.appendChild(
      el(
        "p",
        "help",
        "Enter/A accept · E edit · ←/→ navigate · while editing: Enter submit, Esc cancel",
      ),
    );
  }

  private bannerBar(): HTMLElement {
    const banner = el("div", `banner ${this.flow.banner}`);
    if (this.flow.banner === "offline") {
      banner.textContent = `Service unreachable - ${this.flow.pendingCount} decision(s) queued, retrying`;
    } else if (this.flow.banner === "conflict") {
      banner.textContent = "Item was already decided; refreshed from the service";
    }
    return banner;
  }

  private card(item: QueueItem): HTMLElement {
    const card = el("section", "card");
    card.appendChild(
      el("div", "position", `item ${this.flow.position + 1} of ${this.flow.items.length}`),
    );
    const pair = el("div", "pair");
    pair.appendChild(el("span", "drug", item.drug_raw));
    pair.appendChild(el("span", "route", item.route_raw || "(no route)"));
    card.appendChild(pair);
    card.appendChild(el("div", "task", `task: ${item.task}`));
    if (item.task_definition) {
      card.appendChild(el("div", "definition", item.task_definition));
    }
    const output = el("div", "model-output");
    output.appendChild(el("span", "label", "model output"));
    output.appendChild(
      el("span", `parsed ${item.valid ? "" : "invalid"}`,
        item.valid ? String(item.parsed) : `invalid: ${JSON.stringify(item.raw_output)}`),
    );
    card.appendChild(output);
    if (item.decided) {
      const note =
        item.verdict === "correct"
          ? `decided: corrected to ${String(item.corrected_value)}`
          : "decided: accepted";
      card.appendChild(el("div", "decided", note));
    } else if (this.editing) {
      card.appendChild(this.editor(item));
    }
    return card;
  }

  private editor(item: QueueItem): HTMLElement {
    const wrap = el("div", "editor");
    if (this.flow.isBinary(item)) {
      for (const value of ["0", "1"] as const) {
        const button = el("button", "toggle", value) as HTMLButtonElement;
        button.addEventListener("click", () => void this.submitCorrection(value));
        wrap.appendChild(button);
      }
    } else {
      const input = document.createElement("input");
      input.type = "text";
      input.id = "correction-input";
      input.placeholder = "corrected value (lowercased on submit)";
      wrap.appendChild(input);
      queueMicrotask(() => input.focus());
    }
    return wrap;
  }

  async submitCorrection(explicit?: string): Promise<void> {
    const input = document.getElementById("correction-input") as HTMLInputElement | null;
    const value = explicit ?? input?.value ?? "";
    this.editing = false;
    await this.flow.correctWith(value);
  }

  private statsPanel(stats: Stats | null): HTMLElement {
    const panel = el("aside", "stats");
    if (!stats) return panel;
    const corrections = stats.reviewed > 0 ? `${stats.corrections}/${stats.reviewed}` : "-";
    panel.appendChild(el("div", "stat", `corrections ${corrections}`));
    panel.appendChild(el("div", "stat", `review time ${formatSeconds(stats.review_ms)}`));
    for (const [group, value] of Object.entries(stats.savings)) {
      if (value !== null) {
        panel.appendChild(el("div", "stat savings", `${group} savings ${value.toFixed(1)}%`));
      }
    }
    if (!stats.savings_defined) {
      panel.appendChild(el("div", "stat muted", "savings - (no baseline or nothing reviewed)"));
    }
    return panel;
  }
}
