/** Loss-curve sparkline as an SVG path. */

export interface SparklineOptions {
  width: number;
  height: number;
  pad: number;
  maxPoints: number;
}

export const DEFAULTS: SparklineOptions = { width: 260, height: 48, pad: 2, maxPoints: 260 };

/** Uniformly thin a series down to at most maxPoints samples
 * (keeps first and last). */
export function downsample(values: number[], maxPoints: number): number[] {
  if (values.length <= maxPoints || maxPoints < 2) {
    return values.slice();
  }
  const out: number[] = [];
  const step = (values.length - 1) / (maxPoints - 1);
  for (let i = 0; i < maxPoints; i++) {
    out.push(values[Math.round(i * step)]);
  }
  return out;
}

/**
 * SVG path string for a loss series.  y is flipped (low loss at the
 * bottom edge would read upside-down for a "descending is good" curve,
 * so low values map to low pixels from the bottom).  A constant series
 * draws a mid-height horizontal line.
 */
export function sparklinePath(values: number[], opts: Partial<SparklineOptions> = {}): string {
  const { width, height, pad, maxPoints } = { ...DEFAULTS, ...opts };
  if (values.length === 0) {
    return "";
  }
  const series = downsample(values, maxPoints);
  const lo = Math.min(...series);
  const hi = Math.max(...series);
  const spanX = width - 2 * pad;
  const spanY = height - 2 * pad;
  const n = series.length;
  const pts = series.map((v, i) => {
    const x = pad + (n === 1 ? spanX / 2 : (i / (n - 1)) * spanX);
    const t = hi === lo ? 0.5 : (v - lo) / (hi - lo);
    const y = pad + (1 - t) * spanY;
    return `${x.toFixed(2)},${y.toFixed(2)}`;
  });
  return `M${pts[0]}L${pts.slice(1).join("L")}`.replace(/L$/, "");
}

/** True when the series trends downward (robust to local noise): the
 * mean of the last quarter sits below the mean of the first quarter. */
export function isDecreasing(values: number[]): boolean {
  if (values.length < 4) {
    return values.length >= 2 && values[values.length - 1] < values[0];
  }
  const q = Math.max(1, Math.floor(values.length / 4));
  const head = values.slice(0, q);
  const tail = values.slice(-q);
  const mean = (xs: number[]) => xs.reduce((a, b) => a + b, 0) / xs.length;
  return mean(tail) < mean(head);
}
