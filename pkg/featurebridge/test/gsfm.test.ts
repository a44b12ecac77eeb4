import { describe, expect, it } from 'vitest';
import { decodeGsfm, encodeGsfm, validateGsfm } from '../src/gsfm.js';

describe('gsfm container', () => {
  it('round-trips dimensions and payload', () => {
    const data = new Float32Array(4 * 5 * 3);
    for (let i = 0; i < data.length; i++) data[i] = Math.fround(Math.sin(i * 0.37));
    const buf = encodeGsfm({ height: 4, width: 5, dim: 3, data });
    const back = decodeGsfm(buf);
    expect(back.height).toBe(4);
    expect(back.width).toBe(5);
    expect(back.dim).toBe(3);
    expect(Array.from(back.data)).toEqual(Array.from(data));
  });

  it('writes the exact header layout', () => {
    const buf = encodeGsfm({ height: 2, width: 3, dim: 1, data: new Float32Array(6) });
    expect(buf.subarray(0, 4).toString('ascii')).toBe('GSFM');
    expect(buf.readUInt32LE(4)).toBe(1);
    expect(buf.readUInt32LE(8)).toBe(2);
    expect(buf.readUInt32LE(12)).toBe(3);
    expect(buf.readUInt32LE(16)).toBe(1);
    expect(buf.length).toBe(20 + 6 * 4);
  });

  it('rejects bad magic, size mismatch and non-finite floats', () => {
    const good = encodeGsfm({ height: 1, width: 2, dim: 1, data: new Float32Array([1, 2]) });
    const badMagic = Buffer.from(good);
    badMagic.write('NOPE', 0, 'ascii');
    expect(() => validateGsfm(badMagic)).toThrow(/magic/);

    expect(() => validateGsfm(good.subarray(0, good.length - 1))).toThrow(/size/);

    const nan = encodeGsfm({ height: 1, width: 1, dim: 1, data: new Float32Array([NaN]) });
    expect(() => validateGsfm(nan)).toThrow(/non-finite/);
  });
});
