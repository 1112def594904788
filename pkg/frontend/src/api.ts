// Typed client for the analysis service. All statistical values shown in
// the UI come from these endpoints; the viewer itself only thresholds and
// colors them.

export type Meta = {
  q: number;
  N: number;
  p: number;
  covariates: string[];
  designColumns: string[];
  maskDims: [number, number, number];
  nVoxels: number;
  prefix: string;
  mapKinds: string[];
  fitted: boolean;
};

export type MapMeta = {
  length: number;
  range: [number, number];
  unit: string;
  dtype: string;
};

export type SlicePayload = {
  shape: [number, number];
  data: (number | null)[][];
  range: [number, number];
  unit: string;
  affine: number[][];
  axis: "sagittal" | "coronal" | "axial";
  index: number;
};

export type EmRecord = {
  iteration: number;
  delta_global: number;
  delta_local: number;
  loglik?: number;
};

export type EmStatus = {
  live: boolean;
  iteration: number;
  termination: string | null;
  history: [number, number][];
  events: EmRecord[];
  error: string | null;
};

export type MaskInfo = {
  id: string;
  cutoff: number;
  source: string;
  count: number;
};

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ServiceError extends Error {
  constructor(
    message: string,
    public readonly status: number,
  ) {
    super(message);
  }
}

async function checked(promise: Promise<Response>): Promise<Response> {
  const response = await promise;
  if (!response.ok) {
    let detail = response.statusText;
    try {
      const body = await response.json();
      if (body && typeof body.detail === "string") detail = body.detail;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ServiceError(detail, response.status);
  }
  return response;
}

// Blobs are little-endian float32; decode via DataView so the values are
// bit-exact regardless of host endianness.
export function decodeFloat32LE(buffer: ArrayBuffer): Float32Array {
  const view = new DataView(buffer);
  const n = Math.floor(buffer.byteLength / 4);
  const out = new Float32Array(n);
  for (let i = 0; i < n; i++) out[i] = view.getFloat32(i * 4, true);
  return out;
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private get(path: string): Promise<Response> {
    return checked(this.fetchFn(this.baseUrl + path));
  }

  private post(path: string, body: unknown): Promise<Response> {
    return checked(
      this.fetchFn(this.baseUrl + path, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(body),
      }),
    );
  }

  async meta(): Promise<Meta> {
    return (await this.get("/api/meta")).json();
  }

  /** mapId is a path like "s0/1", "subject/3/2", "beta/2/1" (1-based). */
  async mapBlob(mapId: string): Promise<Float32Array> {
    const response = await this.get(`/api/maps/${mapId}`);
    return decodeFloat32LE(await response.arrayBuffer());
  }

  async mapMeta(mapId: string): Promise<MapMeta> {
    return (await this.get(`/api/maps/${mapId}?meta=1`)).json();
  }

  async slice(mapId: string, axis: string, index: number): Promise<SlicePayload> {
    const params = new URLSearchParams({ map: mapId, axis, index: String(index) });
    return (await this.get(`/api/slice?${params}`)).json();
  }

  async subpop(x: number[], ic?: number): Promise<Float32Array> {
    const response = await this.post("/api/subpop", { x, ic });
    return decodeFloat32LE(await response.arrayBuffer());
  }

  async contrast(
    coefficients: number[],
    ic?: number,
    varianceMode: string = "plug-in",
  ): Promise<Float32Array> {
    const response = await this.post("/api/contrast", {
      lambda: coefficients,
      ic,
      varianceMode,
    });
    return decodeFloat32LE(await response.arrayBuffer());
  }

  async emStatus(): Promise<EmStatus> {
    return (await this.get("/api/em/status")).json();
  }

  async emStart(maxit: number, epsilon1: number, epsilon2: number): Promise<void> {
    await this.post("/api/em/start", { maxit, epsilon1, epsilon2 });
  }

  async emStop(): Promise<void> {
    await this.post("/api/em/stop", {});
  }

  async masks(): Promise<MaskInfo[]> {
    return (await this.get("/api/masks")).json();
  }

  async createMask(cutoff: number, source: string): Promise<{ id: string; count: number }> {
    return (await this.post("/api/masks", { cutoff, source })).json();
  }
}
