/** Keyboard map for the review flow. The whole loop is drivable without a
 * pointer, since review time is the measured quantity:
 *
 *   Enter / A  accept the current item
 *   E          edit-and-correct (input or 0/1 toggle per task domain)
 *   0 / 1      instant binary correction while editing
 *   Left/Right navigate
 *   Escape     leave edit mode
 */

export type Action =
  | { kind: "accept" }
  | { kind: "edit" }
  | { kind: "binary"; value: "0" | "1" }
  | { kind: "move"; delta: number }
  | { kind: "cancel" }
  | { kind: "submit" };

export interface KeyInput {
  key: string;
  ctrlKey: boolean;
  metaKey: boolean;
  altKey: boolean;
  /** Focus is inside a text input; plain letters must keep typing. */
  inTextField: boolean;
}

export function keyInputFrom(event: KeyboardEvent): KeyInput {
  const target = event.target;
  return {
    key: event.key,
    ctrlKey: event.ctrlKey,
    metaKey: event.metaKey,
    altKey: event.altKey,
    inTextField:
      target instanceof HTMLInputElement || target instanceof HTMLTextAreaElement,
  };
}

export function actionFor(input: KeyInput, editing: boolean): Action | null {
  if (input.ctrlKey || input.metaKey || input.altKey) return null;

  if (editing) {
    if (input.key === "Escape") return { kind: "cancel" };
    if (input.key === "Enter") return { kind: "submit" };
    if (!input.inTextField && (input.key === "0" || input.key === "1")) {
      return { kind: "binary", value: input.key };
    }
    return null;
  }
  if (input.inTextField) return null;

  switch (input.key) {
    case "Enter":
    case "a":
    case "A":
      return { kind: "accept" };
    case "e":
    case "E":
      return { kind: "edit" };
    case "ArrowLeft":
      return { kind: "move", delta: -1 };
    case "ArrowRight":
      return { kind: "move", delta: 1 };
    default:
      return null;
  }
}
