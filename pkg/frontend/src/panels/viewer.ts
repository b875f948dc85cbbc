/** Comparison viewer: captured / rendered / |error| layers per frame. */

import type { PreviewPayload } from "../types.js";
import type { ViewModel } from "../state.js";

export class ViewerPanel {
  readonly root: HTMLElement;
  readonly frameInput: HTMLInputElement;
  readonly opacitySlider: HTMLInputElement;
  private captured: HTMLImageElement;
  private rendered: HTMLImageElement;
  private error: HTMLImageElement;
  private mseLabel: HTMLElement;
  private revLabel: HTMLElement;

  constructor(doc: Document, onFrameChange: (frame: number) => void) {
    this.root = doc.createElement("section");
    this.root.className = "panel viewer-panel";
    const h = doc.createElement("h2");
    h.textContent = "Captured vs rendered";

    const controls = doc.createElement("div");
    controls.className = "viewer-controls";
    const frameLabel = doc.createElement("label");
    frameLabel.textContent = "frame";
    this.frameInput = doc.createElement("input");
    this.frameInput.type = "number";
    this.frameInput.min = "0";
    this.frameInput.value = "0";
    this.frameInput.addEventListener("input", () => {
      const f = Number(this.frameInput.value);
      if (Number.isInteger(f) && f >= 0) {
        onFrameChange(f);
      }
    });
    const opacityLabel = doc.createElement("label");
    opacityLabel.textContent = "error overlay";
    this.opacitySlider = doc.createElement("input");
    this.opacitySlider.type = "range";
    this.opacitySlider.min = "0";
    this.opacitySlider.max = "1";
    this.opacitySlider.step = "0.05";
    this.opacitySlider.value = "0.6";
    this.opacitySlider.addEventListener("input", () => {
      this.error.style.opacity = this.opacitySlider.value;
      this.error.style.display = Number(this.opacitySlider.value) === 0 ? "none" : "";
    });
    controls.append(frameLabel, this.frameInput, opacityLabel, this.opacitySlider);

    const strip = doc.createElement("div");
    strip.className = "viewer-strip";
    this.captured = doc.createElement("img");
    this.captured.className = "layer captured";
    this.captured.alt = "captured";
    this.rendered = doc.createElement("img");
    this.rendered.className = "layer rendered";
    this.rendered.alt = "rendered";
    const overlay = doc.createElement("div");
    overlay.className = "overlay-stack";
    this.error = doc.createElement("img");
    this.error.className = "layer error";
    this.error.alt = "absolute error";
    this.error.style.opacity = this.opacitySlider.value;
    overlay.appendChild(this.error);
    strip.append(this.captured, this.rendered, overlay);

    this.mseLabel = doc.createElement("div");
    this.mseLabel.className = "mse-readout";
    this.revLabel = doc.createElement("div");
    this.revLabel.className = "preview-revision";
    this.root.append(h, controls, strip, this.mseLabel, this.revLabel);
  }

  showPreview(payload: PreviewPayload): void {
    this.captured.src = `data:image/png;base64,${payload.captured_png}`;
    this.rendered.src = `data:image/png;base64,${payload.rendered_png}`;
    this.error.src = `data:image/png;base64,${payload.error_png}`;
    this.revLabel.textContent = `preview revision ${payload.revision}`;
  }

  update(view: ViewModel): void {
    this.frameInput.max = String(Math.max(0, view.frames - 1));
    this.mseLabel.textContent =
      `train MSE ${view.trainMse.toExponential(3)} / test MSE ${view.testMse.toExponential(3)}`;
  }
}
