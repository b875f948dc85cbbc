/** Stage controller: freeze toggles, run/stop, live loss sparkline, export. */

import { sparklinePath, DEFAULTS } from "../sparkline.js";
import type { ViewModel } from "../state.js";

const GROUPS = ["pose", "rid", "tau", "ambient", "albedo"];
const SVG_NS = "http://www.w3.org/2000/svg";

export interface StageCallbacks {
  onRun(frozen: string[], iterations: number): void;
  onStop(): void;
  onExport(): void;
}

export class StagePanel {
  readonly root: HTMLElement;
  readonly runButton: HTMLButtonElement;
  readonly stopButton: HTMLButtonElement;
  readonly exportButton: HTMLButtonElement;
  readonly iterationsInput: HTMLInputElement;
  readonly freezeBoxes = new Map<string, HTMLInputElement>();
  readonly sparkPath: SVGPathElement;
  private statusLabel: HTMLElement;
  private lossLabel: HTMLElement;
  private history: HTMLElement;

  constructor(doc: Document, callbacks: StageCallbacks) {
    this.root = doc.createElement("section");
    this.root.className = "panel stage-panel";
    const h = doc.createElement("h2");
    h.textContent = "Optimization";

    const freezeRow = doc.createElement("div");
    freezeRow.className = "freeze-row";
    for (const group of GROUPS) {
      const label = doc.createElement("label");
      const box = doc.createElement("input");
      box.type = "checkbox";
      box.dataset.group = group;
      label.append(box, doc.createTextNode(` freeze ${group}`));
      freezeRow.appendChild(label);
      this.freezeBoxes.set(group, box);
    }

    const runRow = doc.createElement("div");
    runRow.className = "run-row";
    const iterLabel = doc.createElement("label");
    iterLabel.textContent = "iterations";
    this.iterationsInput = doc.createElement("input");
    this.iterationsInput.type = "number";
    this.iterationsInput.min = "1";
    this.iterationsInput.value = "200";
    this.runButton = doc.createElement("button");
    this.runButton.textContent = "run";
    this.runButton.addEventListener("click", () => {
      const frozen = GROUPS.filter((g) => this.freezeBoxes.get(g)?.checked);
      callbacks.onRun(frozen, Math.max(1, Number(this.iterationsInput.value) || 1));
    });
    this.stopButton = doc.createElement("button");
    this.stopButton.textContent = "stop";
    this.stopButton.addEventListener("click", () => callbacks.onStop());
    this.exportButton = doc.createElement("button");
    this.exportButton.textContent = "export rig";
    this.exportButton.addEventListener("click", () => callbacks.onExport());
    runRow.append(iterLabel, this.iterationsInput, this.runButton, this.stopButton, this.exportButton);

    const svg = doc.createElementNS(SVG_NS, "svg") as SVGSVGElement;
    svg.setAttribute("width", String(DEFAULTS.width));
    svg.setAttribute("height", String(DEFAULTS.height));
    svg.setAttribute("class", "loss-sparkline");
    this.sparkPath = doc.createElementNS(SVG_NS, "path") as SVGPathElement;
    this.sparkPath.setAttribute("fill", "none");
    this.sparkPath.setAttribute("stroke", "currentColor");
    svg.appendChild(this.sparkPath);

    this.statusLabel = doc.createElement("div");
    this.statusLabel.className = "status";
    this.lossLabel = doc.createElement("div");
    this.lossLabel.className = "loss-readout";
    this.history = doc.createElement("ul");
    this.history.className = "event-log";

    this.root.append(h, freezeRow, runRow, svg, this.statusLabel, this.lossLabel, this.history);
  }

  setEvents(doc: Document, events: { revision: number; event: string }[]): void {
    this.history.textContent = "";
    for (const entry of events.slice(-8)) {
      const li = doc.createElement("li");
      li.textContent = `#${entry.revision} ${entry.event}`;
      this.history.appendChild(li);
    }
  }

  update(view: ViewModel): void {
    this.runButton.disabled = !view.canRun;
    this.stopButton.disabled = !view.canStop;
    this.exportButton.disabled = view.panelLocked;
    this.iterationsInput.disabled = view.panelLocked;
    for (const box of this.freezeBoxes.values()) {
      box.disabled = view.panelLocked;
    }
    this.sparkPath.setAttribute("d", sparklinePath(view.lossSeries));
    this.statusLabel.textContent =
      `${view.status}${view.stage ? ` (${view.stage})` : ""} rev ${view.revision}`;
    this.lossLabel.textContent =
      view.latestLoss === null ? "no run yet" : `loss ${view.latestLoss.toExponential(4)}`;
  }
}
