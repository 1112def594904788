// Central viewer state with its invariants enforced at the setters.

export type MapSelection = {
  kind: "s0" | "population" | "subject" | "beta" | "se" | "subpop" | "contrast";
  ic: number; // 1-based
  subject?: number; // 1-based, kind === "subject"
  covariate?: number; // 1-based, kind === "beta" | "se"
};

export type Crosshair = [number, number, number];

export class ViewerState {
  selection: MapSelection = { kind: "s0", ic: 1 };
  crosshair: Crosshair;
  threshold = 0;
  subpopulations: number[][] = [];
  contrast: number[] | null = null;
  linkedCursor = true;

  constructor(
    public readonly dims: [number, number, number],
    public readonly p: number,
  ) {
    this.crosshair = [
      Math.floor(dims[0] / 2),
      Math.floor(dims[1] / 2),
      Math.floor(dims[2] / 2),
    ];
  }

  setThreshold(value: number): void {
    if (!Number.isFinite(value) || value < 0) {
      throw new RangeError(`threshold must be >= 0, got ${value}`);
    }
    this.threshold = value;
  }

  setCrosshair(voxel: Crosshair): void {
    for (let axis = 0; axis < 3; axis++) {
      const c = voxel[axis];
      if (!Number.isInteger(c) || c < 0 || c >= this.dims[axis]) {
        throw new RangeError(`crosshair ${voxel} outside dims ${this.dims}`);
      }
    }
    this.crosshair = [voxel[0], voxel[1], voxel[2]];
  }

  addSubpopulation(x: number[]): void {
    if (x.length !== this.p || x.some((v) => !Number.isFinite(v))) {
      throw new RangeError(`sub-population setting must be ${this.p} finite numbers`);
    }
    this.subpopulations.push([...x]);
  }

  removeSubpopulation(index: number): void {
    this.subpopulations.splice(index, 1);
  }
}

/** Map selection to its service path, e.g. {kind: "subject", subject: 3, ic: 2} -> "subject/3/2". */
export function mapIdFor(sel: MapSelection): string {
  switch (sel.kind) {
    case "s0":
    case "population":
      return `${sel.kind}/${sel.ic}`;
    case "subject":
      if (sel.subject === undefined) throw new Error("subject index required");
      return `subject/${sel.subject}/${sel.ic}`;
    case "beta":
    case "se":
      if (sel.covariate === undefined) throw new Error("covariate index required");
      return `${sel.kind}/${sel.covariate}/${sel.ic}`;
    default:
      throw new Error(`${sel.kind} maps are fetched via POST, not a map id`);
  }
}

/** Case-insensitive substring filter for the subject picker. */
export function filterSubjects(filenames: string[], query: string): number[] {
  const needle = query.trim().toLowerCase();
  const hits: number[] = [];
  filenames.forEach((name, i) => {
    if (!needle || name.toLowerCase().includes(needle)) hits.push(i);
  });
  return hits;
}
