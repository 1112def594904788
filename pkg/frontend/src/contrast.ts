// Contrast builder form logic: per-covariate numeric entries -> lambda.

export type ContrastParse =
  | { ok: true; coefficients: number[] }
  | { ok: false; error: string; badIndex?: number };

/**
 * Validate the coefficient entries. Non-numeric entries are rejected with
 * the offending field index; the all-zero contrast is blocked because its
 * z map is undefined.
 */
export function parseContrastEntries(entries: string[]): ContrastParse {
  const coefficients: number[] = [];
  for (let i = 0; i < entries.length; i++) {
    const text = entries[i].trim();
    if (text === "" || !/^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$/.test(text)) {
      return { ok: false, error: `entry ${i + 1} is not a number`, badIndex: i };
    }
    coefficients.push(Number(text));
  }
  if (coefficients.every((c) => c === 0)) {
    return { ok: false, error: "at least one coefficient must be nonzero" };
  }
  return { ok: true, coefficients };
}

/** The coordinate contrast e_k (1-based k), equal to the beta/{k} viewer. */
export function unitContrast(p: number, k: number): number[] {
  const lambda = new Array<number>(p).fill(0);
  lambda[k - 1] = 1;
  return lambda;
}
