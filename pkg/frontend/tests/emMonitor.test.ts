import { describe, expect, it } from "vitest";

import { ApiClient, type EmRecord, type EmStatus } from "../src/api.js";
import { EmMonitor, type EventStreamFactory } from "../src/emMonitor.js";

function statusOf(over: Partial<EmStatus>): EmStatus {
  return {
    live: false,
    iteration: 0,
    termination: null,
    history: [],
    events: [],
    error: null,
    ...over,
  };
}

function clientWith(status: EmStatus, onStop?: () => void): ApiClient {
  const fetchFn = async (url: string, init?: RequestInit) => {
    if (url.endsWith("/api/em/status")) return new Response(JSON.stringify(status));
    if (url.endsWith("/api/em/stop") && init?.method === "POST") {
      onStop?.();
      return new Response(JSON.stringify({ stopping: true }));
    }
    return new Response("{}", { status: 404 });
  };
  return new ApiClient("", fetchFn);
}

type Feed = {
  record(r: EmRecord): void;
  done(): void;
  closed: boolean;
};

function manualStream(): { factory: EventStreamFactory; feeds: Feed[] } {
  const feeds: Feed[] = [];
  const factory: EventStreamFactory = (_url, onRecord, onDone) => {
    const feed: Feed = {
      record: onRecord,
      done: onDone,
      closed: false,
    };
    feeds.push(feed);
    return { close: () => (feed.closed = true) };
  };
  return { factory, feeds };
}

describe("EmMonitor", () => {
  it("is disabled with a note when no run is live", async () => {
    const status = statusOf({ history: [[0.5, 0.2]], iteration: 1, termination: "converged" });
    const monitor = new EmMonitor(clientWith(status), manualStream().factory);
    await monitor.attach();
    expect(monitor.phase).toBe("done");
    expect(monitor.stopEnabled).toBe(false);
    expect(monitor.note).toContain("converged");
    // charts still seeded from the completed run
    expect(monitor.deltaGlobal).toEqual([0.5]);
  });

  it("seeds from status history and appends streamed iterations", async () => {
    const status = statusOf({ live: true, iteration: 2, history: [[0.5, 0.4], [0.3, 0.2]] });
    const { factory, feeds } = manualStream();
    const monitor = new EmMonitor(clientWith(status), factory);
    await monitor.attach();
    expect(monitor.phase).toBe("live");
    feeds[0].record({ iteration: 3, delta_global: 0.1, delta_local: 0.05 });
    expect(monitor.iterations).toEqual([1, 2, 3]);
    expect(monitor.deltaGlobal).toEqual([0.5, 0.3, 0.1]);
    expect(monitor.deltaLocal).toEqual([0.4, 0.2, 0.05]);
  });

  it("ignores replayed duplicates after a reconnect", async () => {
    const status = statusOf({ live: true, iteration: 1, history: [[0.5, 0.4]] });
    const { factory, feeds } = manualStream();
    const monitor = new EmMonitor(clientWith(status), factory);
    await monitor.attach();
    feeds[0].record({ iteration: 1, delta_global: 0.5, delta_local: 0.4 });
    feeds[0].record({ iteration: 2, delta_global: 0.3, delta_local: 0.2 });
    feeds[0].record({ iteration: 2, delta_global: 0.3, delta_local: 0.2 });
    expect(monitor.iterations).toEqual([1, 2]);
  });

  it("stop disables itself after acknowledgment and chart length stays at completed iterations", async () => {
    const status = statusOf({ live: true, iteration: 2, history: [[0.5, 0.4], [0.3, 0.2]] });
    let stopped = false;
    const { factory, feeds } = manualStream();
    const monitor = new EmMonitor(clientWith(status, () => (stopped = true)), factory);
    await monitor.attach();
    expect(monitor.stopEnabled).toBe(true);
    await monitor.requestStop();
    expect(stopped).toBe(true);
    expect(monitor.phase).toBe("stopping");
    expect(monitor.stopEnabled).toBe(false);
    // a second press is a no-op
    stopped = false;
    await monitor.requestStop();
    expect(stopped).toBe(false);
    // stream closes at the iteration boundary
    feeds[0].done();
    expect(monitor.phase).toBe("done");
    expect(monitor.iterations.length).toBe(2);
    expect(feeds[0].closed).toBe(true);
  });

  it("detach closes the stream", async () => {
    const status = statusOf({ live: true, iteration: 0 });
    const { factory, feeds } = manualStream();
    const monitor = new EmMonitor(clientWith(status), factory);
    await monitor.attach();
    monitor.detach();
    expect(feeds[0].closed).toBe(true);
    expect(monitor.phase).toBe("idle");
  });
});
