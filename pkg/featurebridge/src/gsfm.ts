/**
 * GSFM feature-image container.
 *
 * Layout (little-endian): magic "GSFM", u32 version=1, u32 H, u32 W, u32 D,
 * then H*W*D float32 row-major (v, then u, then channel).
 */

const MAGIC = Buffer.from('GSFM', 'ascii');

export interface FeatureImage {
  height: number;
  width: number;
  dim: number;
  /** length height*width*dim, row-major */
  data: Float32Array;
}

export function encodeGsfm(image: FeatureImage): Buffer {
  const { height, width, dim, data } = image;
  if (data.length !== height * width * dim) {
    throw new Error(`data length ${data.length} != ${height}x${width}x${dim}`);
  }
  const header = Buffer.alloc(20);
  MAGIC.copy(header, 0);
  header.writeUInt32LE(1, 4);
  header.writeUInt32LE(height, 8);
  header.writeUInt32LE(width, 12);
  header.writeUInt32LE(dim, 16);
  // serialize explicitly as little-endian regardless of host order
  const payload = Buffer.alloc(data.length * 4);
  for (let i = 0; i < data.length; i++) {
    payload.writeFloatLE(data[i], i * 4);
  }
  return Buffer.concat([header, payload]);
}

export function decodeGsfm(buf: Buffer): FeatureImage {
  if (buf.length < 20 || !buf.subarray(0, 4).equals(MAGIC)) {
    throw new Error('bad GSFM magic');
  }
  const version = buf.readUInt32LE(4);
  if (version !== 1) throw new Error(`unsupported GSFM version ${version}`);
  const height = buf.readUInt32LE(8);
  const width = buf.readUInt32LE(12);
  const dim = buf.readUInt32LE(16);
  const n = height * width * dim;
  if (buf.length !== 20 + n * 4) {
    throw new Error(`GSFM payload size ${buf.length - 20} != ${n * 4}`);
  }
  const data = new Float32Array(n);
  for (let i = 0; i < n; i++) data[i] = buf.readFloatLE(20 + i * 4);
  return { height, width, dim, data };
}

/** Strict conformance check; throws with a reason on any violation. */
export function validateGsfm(buf: Buffer): { height: number; width: number; dim: number } {
  const image = decodeGsfm(buf);
  if (image.height < 1 || image.width < 1 || image.dim < 1) {
    throw new Error('GSFM dimensions must be positive');
  }
  for (let i = 0; i < image.data.length; i++) {
    if (!Number.isFinite(image.data[i])) {
      throw new Error(`non-finite float at index ${i}`);
    }
  }
  return { height: image.height, width: image.width, dim: image.dim };
}
