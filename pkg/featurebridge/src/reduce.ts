/**
 * Linear dimensionality reduction fitted once on reference-view features.
 *
 * PCA via a Jacobi eigensolver on the feature covariance; the projection is
 * persisted so query-time images of a category are reduced with exactly the
 * matrix fitted on its reference views.
 */

import { Mat } from './tensor.js';
import { FeatureImage } from './gsfm.js';

const MAGIC = Buffer.from('GSLR', 'ascii');

export interface Reduction {
  dimIn: number;
  dimOut: number;
  mean: Float64Array;
  /** dimIn x dimOut, row-major */
  matrix: Float64Array;
}

function jacobiEigen(a: Float64Array, n: number, sweeps = 40): { values: Float64Array; vectors: Float64Array } {
  const m = Float64Array.from(a);
  const v = new Float64Array(n * n);
  for (let i = 0; i < n; i++) v[i * n + i] = 1;
  for (let sweep = 0; sweep < sweeps; sweep++) {
    let off = 0;
    for (let p = 0; p < n; p++) {
      for (let q = p + 1; q < n; q++) off += m[p * n + q] * m[p * n + q];
    }
    if (off < 1e-18) break;
    for (let p = 0; p < n; p++) {
      for (let q = p + 1; q < n; q++) {
        const apq = m[p * n + q];
        if (Math.abs(apq) < 1e-15) continue;
        const app = m[p * n + p];
        const aqq = m[q * n + q];
        const theta = 0.5 * Math.atan2(2 * apq, aqq - app);
        const c = Math.cos(theta);
        const s = Math.sin(theta);
        for (let k = 0; k < n; k++) {
          const akp = m[k * n + p];
          const akq = m[k * n + q];
          m[k * n + p] = c * akp - s * akq;
          m[k * n + q] = s * akp + c * akq;
        }
        for (let k = 0; k < n; k++) {
          const apk = m[p * n + k];
          const aqk = m[q * n + k];
          m[p * n + k] = c * apk - s * aqk;
          m[q * n + k] = s * apk + c * aqk;
        }
        for (let k = 0; k < n; k++) {
          const vkp = v[k * n + p];
          const vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  const values = new Float64Array(n);
  for (let i = 0; i < n; i++) values[i] = m[i * n + i];
  return { values, vectors: v };
}

/** Fit a dimOut-component PCA on stacked patch features (rows = samples). */
export function fitReduction(samples: Mat, dimOut: number): Reduction {
  const n = samples.rows;
  const d = samples.cols;
  if (dimOut > d) throw new Error(`cannot expand ${d} -> ${dimOut}`);
  const mean = new Float64Array(d);
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < d; j++) mean[j] += samples.data[i * d + j];
  }
  for (let j = 0; j < d; j++) mean[j] /= n;
  const cov = new Float64Array(d * d);
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < d; j++) {
      const dj = samples.data[i * d + j] - mean[j];
      for (let k = j; k < d; k++) {
        cov[j * d + k] += dj * (samples.data[i * d + k] - mean[k]);
      }
    }
  }
  for (let j = 0; j < d; j++) {
    for (let k = j; k < d; k++) {
      const val = cov[j * d + k] / Math.max(n - 1, 1);
      cov[j * d + k] = val;
      cov[k * d + j] = val;
    }
  }
  const { values, vectors } = jacobiEigen(cov, d);
  const order = Array.from({ length: d }, (_, i) => i).sort((a, b) => values[b] - values[a]);
  const matrix = new Float64Array(d * dimOut);
  for (let c = 0; c < dimOut; c++) {
    const col = order[c];
    // deterministic sign: make the largest-magnitude entry positive
    let maxAbs = 0;
    let sign = 1;
    for (let j = 0; j < d; j++) {
      const val = vectors[j * d + col];
      if (Math.abs(val) > maxAbs) {
        maxAbs = Math.abs(val);
        sign = val >= 0 ? 1 : -1;
      }
    }
    for (let j = 0; j < d; j++) matrix[j * dimOut + c] = sign * vectors[j * d + col];
  }
  return { dimIn: d, dimOut, mean, matrix };
}

export function applyReduction(image: FeatureImage, reduction: Reduction): FeatureImage {
  if (image.dim !== reduction.dimIn) {
    throw new Error(`reduction expects D=${reduction.dimIn}, image has D=${image.dim}`);
  }
  const { height, width } = image;
  const out = new Float32Array(height * width * reduction.dimOut);
  const dIn = reduction.dimIn;
  const dOut = reduction.dimOut;
  for (let pix = 0; pix < height * width; pix++) {
    const src = pix * dIn;
    const dst = pix * dOut;
    for (let c = 0; c < dOut; c++) {
      let s = 0;
      for (let j = 0; j < dIn; j++) {
        s += (image.data[src + j] - reduction.mean[j]) * reduction.matrix[j * dOut + c];
      }
      out[dst + c] = Math.fround(s);
    }
  }
  return { height, width, dim: dOut, data: out };
}

export function encodeReduction(reduction: Reduction): Buffer {
  const { dimIn, dimOut, mean, matrix } = reduction;
  const buf = Buffer.alloc(4 + 8 + (mean.length + matrix.length) * 8);
  MAGIC.copy(buf, 0);
  buf.writeUInt32LE(dimIn, 4);
  buf.writeUInt32LE(dimOut, 8);
  let o = 12;
  for (const v of mean) {
    buf.writeDoubleLE(v, o);
    o += 8;
  }
  for (const v of matrix) {
    buf.writeDoubleLE(v, o);
    o += 8;
  }
  return buf;
}

export function decodeReduction(buf: Buffer): Reduction {
  if (!buf.subarray(0, 4).equals(MAGIC)) throw new Error('bad reduction magic');
  const dimIn = buf.readUInt32LE(4);
  const dimOut = buf.readUInt32LE(8);
  const mean = new Float64Array(dimIn);
  const matrix = new Float64Array(dimIn * dimOut);
  let o = 12;
  for (let i = 0; i < dimIn; i++) {
    mean[i] = buf.readDoubleLE(o);
    o += 8;
  }
  for (let i = 0; i < matrix.length; i++) {
    matrix[i] = buf.readDoubleLE(o);
    o += 8;
  }
  return { dimIn, dimOut, mean, matrix };
}
