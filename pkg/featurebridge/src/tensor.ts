/** Small Float32Array matrix kernel used by the encoder. Row-major. */

export class Mat {
  constructor(
    public rows: number,
    public cols: number,
    public data: Float32Array,
  ) {
    if (data.length !== rows * cols) {
      throw new Error(`matrix ${rows}x${cols} needs ${rows * cols} values, got ${data.length}`);
    }
  }

  static zeros(rows: number, cols: number): Mat {
    return new Mat(rows, cols, new Float32Array(rows * cols));
  }

  get(r: number, c: number): number {
    return this.data[r * this.cols + c];
  }

  set(r: number, c: number, v: number): void {
    this.data[r * this.cols + c] = v;
  }
}

export function matmul(a: Mat, b: Mat): Mat {
  if (a.cols !== b.rows) throw new Error(`matmul ${a.rows}x${a.cols} @ ${b.rows}x${b.cols}`);
  const out = Mat.zeros(a.rows, b.cols);
  for (let i = 0; i < a.rows; i++) {
    for (let k = 0; k < a.cols; k++) {
      const av = a.data[i * a.cols + k];
      if (av === 0) continue;
      const bo = k * b.cols;
      const oo = i * b.cols;
      for (let j = 0; j < b.cols; j++) {
        out.data[oo + j] += av * b.data[bo + j];
      }
    }
  }
  return out;
}

export function addBias(a: Mat, bias: Float32Array): Mat {
  const out = Mat.zeros(a.rows, a.cols);
  for (let i = 0; i < a.rows; i++) {
    for (let j = 0; j < a.cols; j++) {
      out.data[i * a.cols + j] = a.data[i * a.cols + j] + bias[j];
    }
  }
  return out;
}

export function layerNorm(a: Mat, gain: Float32Array, bias: Float32Array, eps = 1e-5): Mat {
  const out = Mat.zeros(a.rows, a.cols);
  for (let i = 0; i < a.rows; i++) {
    let mean = 0;
    for (let j = 0; j < a.cols; j++) mean += a.data[i * a.cols + j];
    mean /= a.cols;
    let variance = 0;
    for (let j = 0; j < a.cols; j++) {
      const d = a.data[i * a.cols + j] - mean;
      variance += d * d;
    }
    variance /= a.cols;
    const inv = 1.0 / Math.sqrt(variance + eps);
    for (let j = 0; j < a.cols; j++) {
      out.data[i * a.cols + j] = (a.data[i * a.cols + j] - mean) * inv * gain[j] + bias[j];
    }
  }
  return out;
}

export function gelu(a: Mat): Mat {
  const out = Mat.zeros(a.rows, a.cols);
  for (let i = 0; i < a.data.length; i++) {
    const x = a.data[i];
    // tanh approximation is fine here: forward-only encoder
    out.data[i] = 0.5 * x * (1 + Math.tanh(Math.sqrt(2 / Math.PI) * (x + 0.044715 * x * x * x)));
  }
  return out;
}

export function softmaxRows(a: Mat): Mat {
  const out = Mat.zeros(a.rows, a.cols);
  for (let i = 0; i < a.rows; i++) {
    let max = -Infinity;
    for (let j = 0; j < a.cols; j++) max = Math.max(max, a.data[i * a.cols + j]);
    let sum = 0;
    for (let j = 0; j < a.cols; j++) {
      const e = Math.exp(a.data[i * a.cols + j] - max);
      out.data[i * a.cols + j] = e;
      sum += e;
    }
    for (let j = 0; j < a.cols; j++) out.data[i * a.cols + j] /= sum;
  }
  return out;
}

export function addInto(target: Mat, other: Mat): void {
  for (let i = 0; i < target.data.length; i++) target.data[i] += other.data[i];
}

/** Deterministic PRNG (mulberry32); the weight source for the stand-in backbone. */
export function mulberry32(seed: number): () => number {
  let s = seed >>> 0;
  return () => {
    s = (s + 0x6d2b79f5) >>> 0;
    let t = s;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export function randMat(rows: number, cols: number, rand: () => number, scale: number): Mat {
  const data = new Float32Array(rows * cols);
  for (let i = 0; i < data.length; i++) {
    // Box-Muller from two uniforms
    const u1 = Math.max(rand(), 1e-12);
    const u2 = rand();
    data[i] = scale * Math.sqrt(-2 * Math.log(u1)) * Math.cos(2 * Math.PI * u2);
  }
  return new Mat(rows, cols, data);
}
