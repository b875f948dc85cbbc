import { describe, expect, it } from "vitest";

import { ApiError, StudioClient } from "../src/api.js";

function stubFetch(handler: (url: string, init?: RequestInit) => { status: number; body: unknown }) {
  const seen: { url: string; init?: RequestInit }[] = [];
  const impl = async (url: string, init?: RequestInit) => {
    seen.push({ url, init });
    const { status, body } = handler(url, init);
    return new Response(JSON.stringify(body), {
      status,
      headers: { "Content-Type": "application/json" },
    });
  };
  return { impl, seen };
}

describe("StudioClient", () => {
  it("normalizes the base url and hits the session endpoints", async () => {
    const { impl, seen } = stubFetch((url) => {
      if (url.endsWith("/sessions")) return { status: 201, body: { id: "s1", revision: 1 } };
      if (url.endsWith("/sessions/s1/state"))
        return { status: 200, body: { revision: 2, status: "idle" } };
      return { status: 404, body: { detail: "nope" } };
    });
    const client = new StudioClient("http://svc:9999///", impl);
    const created = await client.createSession("/tmp/manifest.json");
    expect(created.id).toBe("s1");
    expect(seen[0].url).toBe("http://svc:9999/sessions");
    expect(JSON.parse(seen[0].init?.body as string).manifest_path).toBe("/tmp/manifest.json");
    const state = await client.getState("s1");
    expect(state.revision).toBe(2);
  });

  it("serializes params and surfaces 409 as ApiError", async () => {
    const { impl, seen } = stubFetch((url, init) => {
      if (init?.method === "PUT") return { status: 409, body: { detail: "running" } };
      return { status: 200, body: {} };
    });
    const client = new StudioClient("http://svc", impl);
    await expect(client.putParams("s1", { tau: 0.1 })).rejects.toThrowError(ApiError);
    try {
      await client.putParams("s1", { tau: 0.1 });
    } catch (err) {
      expect((err as ApiError).status).toBe(409);
      expect((err as ApiError).detail).toBe("running");
    }
    expect(seen[0].init?.method).toBe("PUT");
    expect(JSON.parse(seen[0].init?.body as string)).toEqual({ tau: 0.1 });
  });

  it("builds run and preview requests", async () => {
    const { impl, seen } = stubFetch(() => ({ status: 200, body: { revision: 5 } }));
    const client = new StudioClient("http://svc", impl);
    await client.run("abc", { schedule: { seed: 0, stages: [{ name: "s", iterations: 10, frozen: [] }] } });
    await client.preview("abc", 3);
    await client.stop("abc");
    expect(seen[0].url).toBe("http://svc/sessions/abc/run");
    expect(seen[1].url).toBe("http://svc/sessions/abc/preview?frame=3");
    expect(seen[2].url).toBe("http://svc/sessions/abc/stop");
  });
});
