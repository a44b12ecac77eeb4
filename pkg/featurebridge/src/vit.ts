/**
 * Patch vision-transformer encoder producing dense per-pixel features.
 *
 * The architecture mirrors a standard self-supervised ViT backbone: patch
 * embedding, 2D sinusoidal position encoding, pre-norm transformer blocks,
 * final layer norm. Weights are generated deterministically from the model
 * spec's seed, standing in for pretrained parameters in offline
 * environments; the extraction pipeline (patch features upsampled
 * bilinearly to image resolution) is the real contract.
 */

import { RgbImage } from './image.js';
import { FeatureImage } from './gsfm.js';
import {
  Mat,
  addBias,
  addInto,
  gelu,
  layerNorm,
  matmul,
  mulberry32,
  randMat,
  softmaxRows,
} from './tensor.js';

export interface ModelSpec {
  patchSize: number;
  dim: number;
  depth: number;
  heads: number;
  seed: number;
}

export const DEFAULT_SPEC: ModelSpec = { patchSize: 8, dim: 192, depth: 2, heads: 4, seed: 9041 };

interface BlockWeights {
  ln1g: Float32Array;
  ln1b: Float32Array;
  wq: Mat;
  wk: Mat;
  wv: Mat;
  wo: Mat;
  ln2g: Float32Array;
  ln2b: Float32Array;
  w1: Mat;
  b1: Float32Array;
  w2: Mat;
  b2: Float32Array;
}

export class VitEncoder {
  readonly spec: ModelSpec;
  private patchProj: Mat;
  private patchBias: Float32Array;
  private blocks: BlockWeights[];
  private lnFg: Float32Array;
  private lnFb: Float32Array;

  constructor(spec: ModelSpec = DEFAULT_SPEC) {
    if (spec.dim % spec.heads !== 0) throw new Error('dim must divide by heads');
    this.spec = spec;
    const rand = mulberry32(spec.seed);
    const d = spec.dim;
    const patchIn = spec.patchSize * spec.patchSize * 3;
    this.patchProj = randMat(patchIn, d, rand, 1 / Math.sqrt(patchIn));
    this.patchBias = new Float32Array(d);
    this.blocks = [];
    for (let b = 0; b < spec.depth; b++) {
      this.blocks.push({
        ln1g: new Float32Array(d).fill(1),
        ln1b: new Float32Array(d),
        wq: randMat(d, d, rand, 1 / Math.sqrt(d)),
        wk: randMat(d, d, rand, 1 / Math.sqrt(d)),
        wv: randMat(d, d, rand, 1 / Math.sqrt(d)),
        wo: randMat(d, d, rand, 1 / Math.sqrt(d)),
        ln2g: new Float32Array(d).fill(1),
        ln2b: new Float32Array(d),
        w1: randMat(d, 2 * d, rand, 1 / Math.sqrt(d)),
        b1: new Float32Array(2 * d),
        w2: randMat(2 * d, d, rand, 1 / Math.sqrt(2 * d)),
        b2: new Float32Array(d),
      });
    }
    this.lnFg = new Float32Array(d).fill(1);
    this.lnFb = new Float32Array(d);
  }

  /** Patch tokens for an image padded (edge-replicate) to the patch grid. */
  private patchify(image: RgbImage): { tokens: Mat; gridH: number; gridW: number } {
    const p = this.spec.patchSize;
    const gridH = Math.ceil(image.height / p);
    const gridW = Math.ceil(image.width / p);
    const tokens = Mat.zeros(gridH * gridW, p * p * 3);
    for (let gy = 0; gy < gridH; gy++) {
      for (let gx = 0; gx < gridW; gx++) {
        const row = gy * gridW + gx;
        let k = 0;
        for (let dy = 0; dy < p; dy++) {
          const y = Math.min(gy * p + dy, image.height - 1);
          for (let dx = 0; dx < p; dx++) {
            const x = Math.min(gx * p + dx, image.width - 1);
            const src = (y * image.width + x) * 3;
            tokens.data[row * tokens.cols + k++] = image.data[src];
            tokens.data[row * tokens.cols + k++] = image.data[src + 1];
            tokens.data[row * tokens.cols + k++] = image.data[src + 2];
          }
        }
      }
    }
    return { tokens, gridH, gridW };
  }

  private positionEncoding(gridH: number, gridW: number): Mat {
    const d = this.spec.dim;
    const out = Mat.zeros(gridH * gridW, d);
    const quarter = Math.floor(d / 4);
    for (let gy = 0; gy < gridH; gy++) {
      for (let gx = 0; gx < gridW; gx++) {
        const row = gy * gridW + gx;
        for (let k = 0; k < quarter; k++) {
          const freq = Math.pow(10000, (-2 * k) / d);
          out.data[row * d + 4 * k] = Math.sin(gy * freq);
          out.data[row * d + 4 * k + 1] = Math.cos(gy * freq);
          out.data[row * d + 4 * k + 2] = Math.sin(gx * freq);
          out.data[row * d + 4 * k + 3] = Math.cos(gx * freq);
        }
      }
    }
    return out;
  }

  private attention(x: Mat, w: BlockWeights): Mat {
    const { heads, dim } = this.spec;
    const dh = dim / heads;
    const q = matmul(x, w.wq);
    const k = matmul(x, w.wk);
    const v = matmul(x, w.wv);
    const n = x.rows;
    const merged = Mat.zeros(n, dim);
    for (let h = 0; h < heads; h++) {
      const off = h * dh;
      const scores = Mat.zeros(n, n);
      for (let i = 0; i < n; i++) {
        for (let j = 0; j < n; j++) {
          let s = 0;
          for (let c = 0; c < dh; c++) {
            s += q.data[i * dim + off + c] * k.data[j * dim + off + c];
          }
          scores.data[i * n + j] = s / Math.sqrt(dh);
        }
      }
      const attn = softmaxRows(scores);
      for (let i = 0; i < n; i++) {
        for (let c = 0; c < dh; c++) {
          let s = 0;
          for (let j = 0; j < n; j++) {
            s += attn.data[i * n + j] * v.data[j * dim + off + c];
          }
          merged.data[i * dim + off + c] = s;
        }
      }
    }
    return matmul(merged, w.wo);
  }

  /** Per-patch features: (gridH*gridW, dim). */
  encode(image: RgbImage): { features: Mat; gridH: number; gridW: number } {
    const { tokens, gridH, gridW } = this.patchify(image);
    let x = addBias(matmul(tokens, this.patchProj), this.patchBias);
    addInto(x, this.positionEncoding(gridH, gridW));
    for (const block of this.blocks) {
      const attnOut = this.attention(layerNorm(x, block.ln1g, block.ln1b), block);
      addInto(x, attnOut);
      const h = gelu(addBias(matmul(layerNorm(x, block.ln2g, block.ln2b), block.w1), block.b1));
      const ff = addBias(matmul(h, block.w2), block.b2);
      addInto(x, ff);
    }
    x = layerNorm(x, this.lnFg, this.lnFb);
    return { features: x, gridH, gridW };
  }
}

/** Bilinear upsampling of the patch grid to full image resolution. */
export function upsampleToImage(
  features: Mat,
  gridH: number,
  gridW: number,
  height: number,
  width: number,
  patchSize: number,
): FeatureImage {
  const dim = features.cols;
  const out = new Float32Array(height * width * dim);
  for (let y = 0; y < height; y++) {
    // continuous patch-grid coordinates of this pixel's center
    const gy = Math.min(Math.max((y + 0.5) / patchSize - 0.5, 0), gridH - 1);
    const y0 = Math.floor(gy);
    const y1 = Math.min(y0 + 1, gridH - 1);
    const ay = gy - y0;
    for (let x = 0; x < width; x++) {
      const gx = Math.min(Math.max((x + 0.5) / patchSize - 0.5, 0), gridW - 1);
      const x0 = Math.floor(gx);
      const x1 = Math.min(x0 + 1, gridW - 1);
      const ax = gx - x0;
      const o = (y * width + x) * dim;
      const r00 = (y0 * gridW + x0) * dim;
      const r01 = (y0 * gridW + x1) * dim;
      const r10 = (y1 * gridW + x0) * dim;
      const r11 = (y1 * gridW + x1) * dim;
      for (let c = 0; c < dim; c++) {
        out[o + c] =
          (1 - ay) * ((1 - ax) * features.data[r00 + c] + ax * features.data[r01 + c]) +
          ay * ((1 - ax) * features.data[r10 + c] + ax * features.data[r11 + c]);
      }
    }
  }
  return { height, width, dim, data: out };
}
