/** Studio composition: wires the panels to the service through a polling
 * loop (250 ms while a run is live, 1 s when idle). */

import { ApiError, StudioClient } from "./api.js";
import { debounce } from "./debounce.js";
import { deriveView, pollIntervalMs, pruneEdits } from "./state.js";
import { ParamsPanel } from "./panels/params.js";
import { StagePanel } from "./panels/stage.js";
import { ViewerPanel } from "./panels/viewer.js";
import type { ParamEdits, ServerState } from "./types.js";

export interface AppOptions {
  baseUrl?: string;
  putDebounceMs?: number;
  setTimeoutImpl?: typeof setTimeout;
}

export class StudioApp {
  readonly root: HTMLElement;
  readonly client: StudioClient;
  readonly params: ParamsPanel;
  readonly viewer: ViewerPanel;
  readonly stage: StagePanel;
  sessionId: string | null = null;
  edits: ParamEdits = {};
  lastState: ServerState | null = null;
  private notice: HTMLElement;
  private frame = 0;
  private previewRevision = -1;
  private timer: ReturnType<typeof setTimeout> | null = null;
  private disposed = false;
  private doc: Document;
  private pushEdits: ReturnType<typeof debounce<[]>>;

  constructor(doc: Document, client: StudioClient, opts: AppOptions = {}) {
    this.doc = doc;
    this.client = client;
    this.root = doc.createElement("div");
    this.root.className = "studio";
    this.notice = doc.createElement("div");
    this.notice.className = "notice";

    this.params = new ParamsPanel(doc, (name, index, value) => {
      this.bufferEdit(name, index, value);
    });
    this.viewer = new ViewerPanel(doc, (frame) => {
      this.frame = frame;
      this.previewRevision = -1;
      void this.refreshPreview();
    });
    this.stage = new StagePanel(doc, {
      onRun: (frozen, iterations) => void this.startRun(frozen, iterations),
      onStop: () => void this.stopRun(),
      onExport: () => void this.exportRig(),
    });
    this.root.append(this.notice, this.params.root, this.stage.root, this.viewer.root);

    this.pushEdits = debounce(() => void this.flushEdits(), opts.putDebounceMs ?? 250);
  }

  async open(sessionId: string): Promise<void> {
    this.sessionId = sessionId;
    await this.poll();
  }

  bufferEdit(name: string, index: number | null, value: number): void {
    if (!this.lastState) {
      return;
    }
    const edits = this.edits as Record<string, unknown>;
    if (index === null) {
      edits[name] = value;
    } else {
      const server: Record<string, number[]> = {
        translation: this.lastState.rig.pose.translation,
        ambient: this.lastState.rig.ambient,
        albedo: this.lastState.albedo,
        lobe_peak: (this.lastState.rig.rid.peak as number[]) ?? [],
        rotation_axis_angle: [0, 0, 0],
      };
      const current =
        (edits[name] as number[] | undefined) ?? (server[name] ?? []).slice();
      current[index] = value;
      edits[name] = current;
    }
    this.render();
    this.pushEdits();
  }

  async flushEdits(): Promise<void> {
    if (!this.sessionId || Object.keys(this.edits).length === 0) {
      return;
    }
    try {
      await this.client.putParams(this.sessionId, this.edits);
      this.notice.textContent = "";
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        this.notice.textContent = "optimization running: parameters are locked";
      } else {
        this.notice.textContent = `update failed: ${String(err)}`;
      }
    }
    await this.poll();
  }

  async startRun(frozen: string[], iterations: number): Promise<void> {
    if (!this.sessionId) {
      return;
    }
    this.pushEdits.flush();
    try {
      await this.client.run(this.sessionId, {
        schedule: {
          seed: 0,
          stages: [{ name: "interactive", iterations, frozen }],
        },
      });
      this.notice.textContent = "";
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        this.notice.textContent = "a run is already in flight";
      } else {
        this.notice.textContent = `run failed to start: ${String(err)}`;
      }
    }
    await this.poll();
  }

  async stopRun(): Promise<void> {
    if (this.sessionId) {
      await this.client.stop(this.sessionId);
      await this.poll();
    }
  }

  async exportRig(): Promise<void> {
    if (!this.sessionId) {
      return;
    }
    const rig = await this.client.exportRig(this.sessionId);
    const text = JSON.stringify(rig, null, 1);
    const blob = new Blob([text], { type: "application/json" });
    const url = URL.createObjectURL(blob);
    const a = this.doc.createElement("a");
    a.href = url;
    a.download = "rig.json";
    a.click();
    URL.revokeObjectURL(url);
  }

  async poll(): Promise<void> {
    if (!this.sessionId || this.disposed) {
      return;
    }
    try {
      const state = await this.client.getState(this.sessionId);
      this.lastState = state;
      this.edits = pruneEdits(state, this.edits);
      this.render();
      if (state.revision !== this.previewRevision && state.status !== "running") {
        await this.refreshPreview();
      }
    } catch (err) {
      this.notice.textContent = `state fetch failed: ${String(err)}`;
    }
    this.schedule();
  }

  private schedule(): void {
    if (this.disposed || !this.lastState) {
      return;
    }
    if (this.timer !== null) {
      clearTimeout(this.timer);
    }
    this.timer = setTimeout(() => void this.poll(), pollIntervalMs(this.lastState.status));
  }

  async refreshPreview(): Promise<void> {
    if (!this.sessionId || !this.lastState) {
      return;
    }
    try {
      const payload = await this.client.preview(this.sessionId, this.frame);
      this.previewRevision = payload.revision;
      this.viewer.showPreview(payload);
    } catch {
      // frame may be transiently out of range while switching sessions
    }
  }

  render(): void {
    if (!this.lastState) {
      return;
    }
    const view = deriveView(this.lastState, this.edits);
    this.params.update(view);
    this.viewer.update(view);
    this.stage.update(view);
    this.stage.setEvents(this.doc, this.lastState.events);
  }

  dispose(): void {
    this.disposed = true;
    if (this.timer !== null) {
      clearTimeout(this.timer);
    }
    this.pushEdits.cancel();
  }
}

/** Browser entry: session-creation form plus the three panels. */
export function boot(doc: Document, baseUrl: string): StudioApp {
  const client = new StudioClient(baseUrl);
  const app = new StudioApp(doc, client);
  const form = doc.createElement("form");
  form.className = "session-form";
  const input = doc.createElement("input");
  input.placeholder = "path to dataset manifest.json (server-local)";
  input.size = 60;
  const button = doc.createElement("button");
  button.textContent = "open session";
  form.append(input, button);
  form.addEventListener("submit", (ev) => {
    ev.preventDefault();
    void client.createSession(input.value).then((res) => app.open(res.id));
  });
  doc.body.append(form, app.root);
  return app;
}
