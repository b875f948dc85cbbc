/** Payload shapes of the calibration service's JSON API. */

export interface RigPose {
  rotation: number[][];
  translation: number[];
}

export interface RigState {
  channels: number;
  pose: RigPose;
  rid: { kind: string; peak?: number[]; sigma?: number; value?: number[] };
  tau: number;
  ambient: number[];
}

export interface SubsetMetrics {
  l1: number;
  mse: number;
}

export interface Metrics {
  train: SubsetMetrics;
  test: SubsetMetrics;
}

export type SessionStatus = "idle" | "running" | "failed";

export interface ServerState {
  revision: number;
  status: SessionStatus;
  stage: string | null;
  iteration: number;
  loss_history: number[];
  rig: RigState;
  albedo: number[];
  frames: number;
  channels: number;
  metrics: Metrics;
  events: { revision: number; event: string }[];
}

export interface PreviewPayload {
  revision: number;
  frame: number;
  roi: number[][];
  metrics: Metrics;
  captured_png: string;
  rendered_png: string;
  error_png: string;
}

/** Partial parameter update; mirrors PUT /sessions/{id}/params. */
export interface ParamEdits {
  translation?: number[];
  rotation_axis_angle?: number[];
  tau?: number;
  ambient?: number[];
  albedo?: number[];
  lobe_sigma?: number;
  lobe_peak?: number[];
}

export interface StageRequest {
  name: string;
  iterations: number;
  frozen: string[];
  learning_rates?: Record<string, number>;
}

export interface RunRequest {
  schedule: {
    seed: number;
    stages: StageRequest[];
  };
}
