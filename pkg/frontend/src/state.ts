/**
 * View-model derivation.
 *
 * The rendered UI is a pure function of the latest server state plus the
 * local edit buffer: reloading the page and re-fetching /state rebuilds
 * the exact same view.  Edits live in the buffer until the debounced PUT
 * lands; a field shows the edited value while dirty, the server value
 * otherwise.
 */

import type { ParamEdits, ServerState } from "./types.js";

export interface FieldView {
  value: number;
  dirty: boolean;
}

export interface ViewModel {
  revision: number;
  status: string;
  stage: string | null;
  panelLocked: boolean;
  canRun: boolean;
  canStop: boolean;
  lossSeries: number[];
  latestLoss: number | null;
  trainMse: number;
  testMse: number;
  frames: number;
  channels: number;
  translation: FieldView[];
  rotation: FieldView[]; // axis-angle, radians
  tau: FieldView;
  ambient: FieldView[];
  albedo: FieldView[];
  lobeSigma: FieldView | null;
  lobePeak: FieldView[] | null;
}

/** Principal-branch matrix logarithm for displaying rotations as axis-angle. */
export function axisAngleFromMatrix(m: number[][]): number[] {
  const trace = m[0][0] + m[1][1] + m[2][2];
  const cos = Math.min(1, Math.max(-1, (trace - 1) / 2));
  const theta = Math.acos(cos);
  const w = [
    (m[2][1] - m[1][2]) / 2,
    (m[0][2] - m[2][0]) / 2,
    (m[1][0] - m[0][1]) / 2,
  ];
  if (theta < 1e-7) {
    return w;
  }
  const k = theta / Math.sin(theta);
  return w.map((x) => x * k);
}

function field(server: number, edited: number | undefined): FieldView {
  if (edited === undefined || edited === server) {
    return { value: edited ?? server, dirty: false };
  }
  return { value: edited, dirty: true };
}

function vectorField(server: number[], edited: number[] | undefined): FieldView[] {
  return server.map((v, i) => field(v, edited?.[i]));
}

export function deriveView(state: ServerState, edits: ParamEdits): ViewModel {
  const running = state.status === "running";
  const isLobe = state.rig.rid.kind === "gaussian_lobe";
  const serverAxisAngle = axisAngleFromMatrix(state.rig.pose.rotation);
  return {
    revision: state.revision,
    status: state.status,
    stage: state.stage,
    panelLocked: running,
    canRun: !running,
    canStop: running,
    lossSeries: state.loss_history,
    latestLoss: state.loss_history.length
      ? state.loss_history[state.loss_history.length - 1]
      : null,
    trainMse: state.metrics.train.mse,
    testMse: state.metrics.test.mse,
    frames: state.frames,
    channels: state.channels,
    translation: vectorField(state.rig.pose.translation, edits.translation),
    rotation: vectorField(serverAxisAngle, edits.rotation_axis_angle),
    tau: field(state.rig.tau, edits.tau),
    ambient: vectorField(state.rig.ambient, edits.ambient),
    albedo: vectorField(state.albedo, edits.albedo),
    lobeSigma: isLobe ? field(state.rig.rid.sigma as number, edits.lobe_sigma) : null,
    lobePeak: isLobe ? vectorField(state.rig.rid.peak as number[], edits.lobe_peak) : null,
  };
}

/** Validate one numeric edit; returns an error message or null. */
export function validateEdit(name: string, value: number): string | null {
  if (!Number.isFinite(value)) {
    return "must be a finite number";
  }
  if (name === "tau" && value < 0) {
    return "tau must be >= 0";
  }
  if (name === "lobe_sigma" && value <= 0) {
    return "sigma must be > 0";
  }
  if ((name === "albedo" || name === "ambient" || name === "lobe_peak") && value < 0) {
    return "must be >= 0";
  }
  if (name === "albedo" && value > 1) {
    return "albedo must be <= 1";
  }
  return null;
}

/** Drop buffered edits the server has since confirmed (same value). */
export function pruneEdits(state: ServerState, edits: ParamEdits): ParamEdits {
  const out: ParamEdits = { ...edits };
  const close = (a: number, b: number) => Math.abs(a - b) <= 1e-12 * Math.max(1, Math.abs(a));
  if (out.tau !== undefined && close(out.tau, state.rig.tau)) {
    delete out.tau;
  }
  if (
    out.translation !== undefined &&
    out.translation.every((v, i) => close(v, state.rig.pose.translation[i]))
  ) {
    delete out.translation;
  }
  if (
    out.ambient !== undefined &&
    out.ambient.every((v, i) => close(v, state.rig.ambient[i]))
  ) {
    delete out.ambient;
  }
  if (out.albedo !== undefined && out.albedo.every((v, i) => close(v, state.albedo[i]))) {
    delete out.albedo;
  }
  if (
    out.lobe_sigma !== undefined &&
    state.rig.rid.kind === "gaussian_lobe" &&
    close(out.lobe_sigma, state.rig.rid.sigma as number)
  ) {
    delete out.lobe_sigma;
  }
  const serverAA = axisAngleFromMatrix(state.rig.pose.rotation);
  if (
    out.rotation_axis_angle !== undefined &&
    out.rotation_axis_angle.every((v, i) => Math.abs(v - serverAA[i]) <= 1e-9)
  ) {
    delete out.rotation_axis_angle;
  }
  return out;
}

/** Poll cadence: fast while optimizing, relaxed when idle. */
export function pollIntervalMs(status: string): number {
  return status === "running" ? 250 : 1000;
}
