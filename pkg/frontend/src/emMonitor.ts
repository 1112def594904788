// Live EM convergence monitor: per-iteration (delta_global, delta_local)
// series fed by the server-sent event stream, with replay-safe appends and
// a cooperative Stop.

import type { ApiClient, EmRecord, EmStatus } from "./api.js";

export type MonitorPhase = "idle" | "live" | "stopping" | "done";

export type EventStream = {
  close(): void;
};

export type EventStreamFactory = (
  url: string,
  onRecord: (record: EmRecord) => void,
  onDone: () => void,
) => EventStream;

/** Default factory using the browser EventSource (auto-reconnects and
 * resends Last-Event-ID, which the service uses to replay iterations). */
export const eventSourceFactory: EventStreamFactory = (url, onRecord, onDone) => {
  const source = new EventSource(url);
  source.onmessage = (event) => {
    try {
      onRecord(JSON.parse(event.data) as EmRecord);
    } catch (err) {
      console.error("bad EM event payload", err);
    }
  };
  source.addEventListener("done", () => {
    source.close();
    onDone();
  });
  return { close: () => source.close() };
};

export class EmMonitor {
  phase: MonitorPhase = "idle";
  iterations: number[] = [];
  deltaGlobal: number[] = [];
  deltaLocal: number[] = [];
  note = "";
  private stream: EventStream | null = null;

  constructor(
    private readonly client: ApiClient,
    private readonly streamFactory: EventStreamFactory = eventSourceFactory,
    private readonly eventsUrl: string = "/api/em/events",
  ) {}

  get stopEnabled(): boolean {
    return this.phase === "live";
  }

  /** Seed the charts from /api/em/status and open the event stream. */
  async attach(): Promise<void> {
    const status = await this.client.emStatus();
    this.seed(status);
    if (!status.live) {
      this.phase = "done";
      this.note = status.termination
        ? `no live run (last run: ${status.termination})`
        : "no live run";
      return;
    }
    this.phase = "live";
    this.stream = this.streamFactory(
      this.eventsUrl,
      (record) => this.append(record),
      () => this.finish(),
    );
  }

  seed(status: EmStatus): void {
    this.iterations = [];
    this.deltaGlobal = [];
    this.deltaLocal = [];
    status.history.forEach(([dg, dl], i) => {
      this.iterations.push(i + 1);
      this.deltaGlobal.push(dg);
      this.deltaLocal.push(dl);
    });
  }

  /** Append one completed iteration; replayed duplicates are ignored. */
  append(record: EmRecord): void {
    const last = this.iterations[this.iterations.length - 1] ?? 0;
    if (record.iteration <= last) return;
    this.iterations.push(record.iteration);
    this.deltaGlobal.push(record.delta_global);
    this.deltaLocal.push(record.delta_local);
  }

  async requestStop(): Promise<void> {
    if (!this.stopEnabled) return;
    this.phase = "stopping"; // button disabled once acknowledged
    await this.client.emStop();
  }

  finish(): void {
    this.phase = "done";
    if (this.stream) {
      this.stream.close();
      this.stream = null;
    }
  }

  detach(): void {
    if (this.stream) {
      this.stream.close();
      this.stream = null;
    }
    this.phase = "idle";
  }
}
