/** Parameter panel: sliders + numeric fields for the rig initialization. */

import { validateEdit } from "../state.js";
import type { ViewModel, FieldView } from "../state.js";

export type EditHandler = (name: string, index: number | null, value: number) => void;

interface Row {
  wrap: HTMLElement;
  slider: HTMLInputElement;
  box: HTMLInputElement;
  error: HTMLElement;
}

const SLIDER_RANGES: Record<string, [number, number, number]> = {
  translation: [-1.0, 1.0, 0.001],
  rotation_axis_angle: [-1.6, 1.6, 0.001],
  tau: [0.0, 0.5, 0.0005],
  ambient: [0.0, 0.3, 0.0005],
  albedo: [0.0, 1.0, 0.001],
  lobe_sigma: [0.02, 2.0, 0.001],
  lobe_peak: [0.0, 5.0, 0.01],
};

export class ParamsPanel {
  readonly root: HTMLElement;
  private rows = new Map<string, Row>();
  private doc: Document;

  constructor(doc: Document, private onEdit: EditHandler) {
    this.doc = doc;
    this.root = doc.createElement("section");
    this.root.className = "panel params-panel";
    const h = doc.createElement("h2");
    h.textContent = "Light parameters";
    this.root.appendChild(h);
  }

  private key(name: string, index: number | null): string {
    return index === null ? name : `${name}.${index}`;
  }

  private ensureRow(name: string, index: number | null, label: string): Row {
    const key = this.key(name, index);
    let row = this.rows.get(key);
    if (row) {
      return row;
    }
    const doc = this.doc;
    const wrap = doc.createElement("div");
    wrap.className = "param-row";
    wrap.dataset.param = key;
    const lab = doc.createElement("label");
    lab.textContent = label;
    const slider = doc.createElement("input");
    slider.type = "range";
    const [lo, hi, step] = SLIDER_RANGES[name] ?? [-2, 2, 0.001];
    slider.min = String(lo);
    slider.max = String(hi);
    slider.step = String(step);
    const box = doc.createElement("input");
    box.type = "number";
    box.step = String(step);
    const error = doc.createElement("span");
    error.className = "field-error";
    const commit = (raw: string) => {
      const value = Number(raw);
      const problem = validateEdit(name, value);
      error.textContent = problem ?? "";
      if (problem === null) {
        this.onEdit(name, index, value);
      }
    };
    slider.addEventListener("input", () => {
      box.value = slider.value;
      commit(slider.value);
    });
    box.addEventListener("input", () => commit(box.value));
    wrap.append(lab, slider, box, error);
    this.root.appendChild(wrap);
    row = { wrap, slider, box, error };
    this.rows.set(key, row);
    return row;
  }

  private setRow(name: string, index: number | null, label: string, f: FieldView, locked: boolean) {
    const row = this.ensureRow(name, index, label);
    const active = this.doc.activeElement;
    if (active !== row.slider && active !== row.box) {
      row.slider.value = String(f.value);
      row.box.value = String(Number(f.value.toPrecision(6)));
    }
    row.slider.disabled = locked;
    row.box.disabled = locked;
    row.wrap.classList.toggle("dirty", f.dirty);
  }

  update(view: ViewModel): void {
    const locked = view.panelLocked;
    this.root.classList.toggle("locked", locked);
    const axes = ["x", "y", "z"];
    view.translation.forEach((f, i) =>
      this.setRow("translation", i, `t ${axes[i]} (m)`, f, locked),
    );
    view.rotation.forEach((f, i) =>
      this.setRow("rotation_axis_angle", i, `rot ${axes[i]} (rad)`, f, locked),
    );
    this.setRow("tau", null, "falloff tau (m^2)", view.tau, locked);
    view.ambient.forEach((f, i) => this.setRow("ambient", i, `ambient ch${i}`, f, locked));
    view.albedo.forEach((f, i) => this.setRow("albedo", i, `albedo ch${i}`, f, locked));
    if (view.lobeSigma) {
      this.setRow("lobe_sigma", null, "lobe sigma (rad)", view.lobeSigma, locked);
    }
    view.lobePeak?.forEach((f, i) =>
      this.setRow("lobe_peak", i, `lobe peak ch${i}`, f, locked),
    );
  }
}
