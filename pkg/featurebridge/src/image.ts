/**
 * Minimal image decoding: binary PPM (P6, 8-bit) and PNG (8-bit RGB/RGBA,
 * non-interlaced). Returns planar-free RGB rows normalized to [0, 1].
 */

import * as zlib from 'node:zlib';

export interface RgbImage {
  width: number;
  height: number;
  /** length height*width*3, row-major, values in [0, 1] */
  data: Float32Array;
}

export function decodeImage(buf: Buffer, name = 'image'): RgbImage {
  if (buf.length >= 2 && buf[0] === 0x50 && buf[1] === 0x36) return decodePpm(buf);
  if (buf.length >= 8 && buf.readUInt32BE(0) === 0x89504e47) return decodePng(buf);
  throw new Error(`${name}: unsupported image format (need PPM P6 or 8-bit PNG)`);
}

function decodePpm(buf: Buffer): RgbImage {
  let pos = 0;
  const token = (): string => {
    // skip whitespace and comment lines
    while (pos < buf.length) {
      const c = buf[pos];
      if (c === 0x23) {
        while (pos < buf.length && buf[pos] !== 0x0a) pos++;
      } else if (c === 0x20 || c === 0x09 || c === 0x0a || c === 0x0d) {
        pos++;
      } else break;
    }
    const start = pos;
    while (pos < buf.length && ![0x20, 0x09, 0x0a, 0x0d].includes(buf[pos])) pos++;
    return buf.subarray(start, pos).toString('ascii');
  };
  if (token() !== 'P6') throw new Error('not a P6 PPM');
  const width = parseInt(token(), 10);
  const height = parseInt(token(), 10);
  const maxval = parseInt(token(), 10);
  if (!(width > 0 && height > 0) || maxval !== 255) {
    throw new Error('PPM must be 8-bit with positive dimensions');
  }
  pos++; // single whitespace after maxval
  const need = width * height * 3;
  if (buf.length - pos < need) throw new Error('truncated PPM payload');
  const data = new Float32Array(need);
  for (let i = 0; i < need; i++) data[i] = buf[pos + i] / 255.0;
  return { width, height, data };
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

function decodePng(buf: Buffer): RgbImage {
  let pos = 8;
  let width = 0;
  let height = 0;
  let bitDepth = 0;
  let colorType = 0;
  const idat: Buffer[] = [];
  while (pos + 8 <= buf.length) {
    const len = buf.readUInt32BE(pos);
    const type = buf.subarray(pos + 4, pos + 8).toString('ascii');
    const body = buf.subarray(pos + 8, pos + 8 + len);
    if (type === 'IHDR') {
      width = body.readUInt32BE(0);
      height = body.readUInt32BE(4);
      bitDepth = body[8];
      colorType = body[9];
      if (body[12] !== 0) throw new Error('interlaced PNG not supported');
    } else if (type === 'IDAT') {
      idat.push(Buffer.from(body));
    } else if (type === 'IEND') {
      break;
    }
    pos += 12 + len;
  }
  if (bitDepth !== 8 || (colorType !== 2 && colorType !== 6)) {
    throw new Error('only 8-bit RGB/RGBA PNG supported');
  }
  const channels = colorType === 2 ? 3 : 4;
  const raw = zlib.inflateSync(Buffer.concat(idat));
  const stride = width * channels;
  const out = new Float32Array(width * height * 3);
  const prev = new Uint8Array(stride);
  const line = new Uint8Array(stride);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const row = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    for (let x = 0; x < stride; x++) {
      const left = x >= channels ? line[x - channels] : 0;
      const up = prev[x];
      const corner = x >= channels ? prev[x - channels] : 0;
      let v = row[x];
      if (filter === 1) v = (v + left) & 0xff;
      else if (filter === 2) v = (v + up) & 0xff;
      else if (filter === 3) v = (v + ((left + up) >> 1)) & 0xff;
      else if (filter === 4) v = (v + paeth(left, up, corner)) & 0xff;
      else if (filter !== 0) throw new Error(`unknown PNG filter ${filter}`);
      line[x] = v;
    }
    for (let x = 0; x < width; x++) {
      for (let c = 0; c < 3; c++) {
        out[(y * width + x) * 3 + c] = line[x * channels + c] / 255.0;
      }
    }
    prev.set(line);
  }
  return { width, height, data: out };
}

/** Writes a P6 PPM; handy for fixtures and round-trip checks. */
export function encodePpm(image: RgbImage): Buffer {
  const header = Buffer.from(`P6\n${image.width} ${image.height}\n255\n`, 'ascii');
  const body = Buffer.alloc(image.width * image.height * 3);
  for (let i = 0; i < body.length; i++) {
    body[i] = Math.max(0, Math.min(255, Math.round(image.data[i] * 255)));
  }
  return Buffer.concat([header, body]);
}
