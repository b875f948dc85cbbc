/** Thin typed client for the calibration service. */

import type {
  ParamEdits,
  PreviewPayload,
  RigState,
  RunRequest,
  ServerState,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: unknown,
  ) {
    super(`service returned ${status}`);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class StudioClient {
  constructor(
    public baseUrl: string,
    private fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, {
      method,
      headers: body === undefined ? undefined : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await response.text();
    const payload = text ? JSON.parse(text) : null;
    if (!response.ok) {
      throw new ApiError(response.status, payload?.detail ?? payload);
    }
    return payload as T;
  }

  createSession(manifestPath: string, initRigPath?: string): Promise<{ id: string; revision: number }> {
    return this.request("POST", "/sessions", {
      manifest_path: manifestPath,
      init_rig_path: initRigPath ?? null,
    });
  }

  getState(sessionId: string): Promise<ServerState> {
    return this.request("GET", `/sessions/${sessionId}/state`);
  }

  putParams(sessionId: string, edits: ParamEdits): Promise<{ revision: number }> {
    return this.request("PUT", `/sessions/${sessionId}/params`, edits);
  }

  run(sessionId: string, body: RunRequest | { iterations: number }): Promise<{ revision: number }> {
    return this.request("POST", `/sessions/${sessionId}/run`, body);
  }

  stop(sessionId: string): Promise<{ revision: number; status: string }> {
    return this.request("POST", `/sessions/${sessionId}/stop`);
  }

  preview(sessionId: string, frame: number): Promise<PreviewPayload> {
    return this.request("GET", `/sessions/${sessionId}/preview?frame=${frame}`);
  }

  exportRig(sessionId: string): Promise<RigState> {
    return this.request("GET", `/sessions/${sessionId}/rig`);
  }
}
