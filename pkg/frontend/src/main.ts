/** Bootstrap: pick a run, open a session, wire keyboard and view. */

import { ReviewApi } from "./api.js";
import { ReviewFlow } from "./controller.js";
import { actionFor, keyInputFrom } from "./keyboard.js";
import { ReviewView } from "./view.js";

async function boot(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app element");

  const api = new ReviewApi("");
  const params = new URLSearchParams(window.location.search);

  const flow = new ReviewFlow({
    api,
    now: () => performance.now(),
    onChange: () => view.render(),
  });
  const view = new ReviewView(root, flow);

  const runs = await api.listRuns();
  if (runs.length === 0) {
    root.textContent = "No runs available to review.";
    return;
  }
  const runId = params.get("run") ?? runs[0].run_id;
  const task = params.get("task") ?? undefined;
  const resumeSession = params.get("session");
  if (resumeSession) {
    await flow.resume(resumeSession, task);
  } else {
    await flow.start(runId, task);
  }
  // keep the session in the URL so a reload resumes instead of restarting
  params.set("session", flow.sessionId);
  history.replaceState(null, "", `?${params}`);

  window.addEventListener("keydown", (event) => {
    const action = actionFor(keyInputFrom(event), view.editing);
    if (!action) return;
    event.preventDefault();
    switch (action.kind) {
      case "accept":
        void flow.accept();
        break;
      case "edit":
        view.editing = true;
        view.render();
        break;
      case "binary":
        void view.submitCorrection(action.value);
        break;
      case "submit":
        void view.submitCorrection();
        break;
      case "cancel":
        view.editing = false;
        view.render();
        break;
      case "move":
        view.editing = false;
        flow.move(action.delta);
        break;
    }
  });

  view.render();
}

boot().catch((err) => {
  const root = document.getElementById("app");
  if (root) root.textContent = `Failed to start: ${err}`;
  console.error(err);
});
