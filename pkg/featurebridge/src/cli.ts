/**
 * extract: images listed in a manifest -> per-pixel GSFM feature maps.
 *
 *   node dist/cli.js extract --manifest m.json --out dir [--reduce 64]
 *                            [--model spec.json] [--reduction-file path]
 *
 * Per-image decode failures are reported and skipped; the exit code is
 * nonzero only when nothing could be extracted. When --reduce is set, the
 * linear reduction is fitted once on this manifest's images (the reference
 * views) unless a persisted reduction file already exists, in which case it
 * is reused, so query batches share the reference projection.
 */

import * as fs from 'node:fs';
import * as path from 'node:path';
import { decodeImage } from './image.js';
import { encodeGsfm } from './gsfm.js';
import { DEFAULT_SPEC, ModelSpec, VitEncoder, upsampleToImage } from './vit.js';
import { Mat } from './tensor.js';
import {
  Reduction,
  applyReduction,
  decodeReduction,
  encodeReduction,
  fitReduction,
} from './reduce.js';

interface ManifestEntry {
  image_id: string;
  image_file: string;
  camera_file?: string;
  [key: string]: unknown;
}

function parseArgs(argv: string[]): Map<string, string> {
  const out = new Map<string, string>();
  for (let i = 0; i < argv.length; i++) {
    if (argv[i].startsWith('--')) {
      const key = argv[i].slice(2);
      const value = i + 1 < argv.length && !argv[i + 1].startsWith('--') ? argv[++i] : 'true';
      out.set(key, value);
    } else {
      throw new Error(`unexpected argument ${argv[i]}`);
    }
  }
  return out;
}

function loadManifest(manifestPath: string): ManifestEntry[] {
  const obj = JSON.parse(fs.readFileSync(manifestPath, 'utf-8'));
  const entries: ManifestEntry[] = Array.isArray(obj) ? obj : obj.entries;
  if (!Array.isArray(entries)) throw new Error('manifest has no entry list');
  const base = path.dirname(manifestPath);
  return entries.map((e) => ({
    ...e,
    image_file: path.isAbsolute(e.image_file) ? e.image_file : path.join(base, e.image_file),
  }));
}

export function extract(argv: string[]): number {
  const args = parseArgs(argv);
  const manifestPath = args.get('manifest');
  const outDir = args.get('out');
  if (!manifestPath || !outDir) {
    process.stderr.write('usage: extract --manifest m.json --out dir [--reduce D]\n');
    return 2;
  }
  let spec: ModelSpec = DEFAULT_SPEC;
  if (args.has('model')) {
    spec = { ...DEFAULT_SPEC, ...JSON.parse(fs.readFileSync(args.get('model')!, 'utf-8')) };
  }
  const reduceDim = args.has('reduce') ? parseInt(args.get('reduce')!, 10) : null;
  const reductionFile = args.get('reduction-file') ?? path.join(outDir, 'reduction.gslr');

  fs.mkdirSync(outDir, { recursive: true });
  const encoder = new VitEncoder(spec);

  const entries = loadManifest(manifestPath);
  const failures: { image_id: string; error: string }[] = [];
  const encoded: { entry: ManifestEntry; gridFeatures: Mat; gridH: number; gridW: number; height: number; width: number }[] = [];
  for (const entry of entries) {
    try {
      const image = decodeImage(fs.readFileSync(entry.image_file), entry.image_file);
      const { features, gridH, gridW } = encoder.encode(image);
      encoded.push({ entry, gridFeatures: features, gridH, gridW, height: image.height, width: image.width });
    } catch (err) {
      failures.push({ image_id: entry.image_id, error: String(err) });
    }
  }

  let reduction: Reduction | null = null;
  if (reduceDim !== null) {
    if (fs.existsSync(reductionFile)) {
      reduction = decodeReduction(fs.readFileSync(reductionFile));
      if (reduction.dimOut !== reduceDim) {
        process.stderr.write(
          `persisted reduction has D=${reduction.dimOut}, ignoring --reduce ${reduceDim}\n`,
        );
      }
    } else {
      let total = 0;
      for (const e of encoded) total += e.gridFeatures.rows;
      const stacked = Mat.zeros(total, spec.dim);
      let row = 0;
      for (const e of encoded) {
        stacked.data.set(e.gridFeatures.data, row * spec.dim);
        row += e.gridFeatures.rows;
      }
      reduction = fitReduction(stacked, reduceDim);
      fs.writeFileSync(reductionFile, encodeReduction(reduction));
    }
  }

  const manifestOut: Record<string, unknown>[] = [];
  for (const e of encoded) {
    let fmap = upsampleToImage(e.gridFeatures, e.gridH, e.gridW, e.height, e.width, spec.patchSize);
    if (reduction) fmap = applyReduction(fmap, reduction);
    const name = `${e.entry.image_id}.gsfm`;
    fs.writeFileSync(path.join(outDir, name), encodeGsfm(fmap));
    const rec: Record<string, unknown> = { image_id: e.entry.image_id, feature_file: name };
    if (e.entry.camera_file) rec.camera_file = e.entry.camera_file;
    manifestOut.push(rec);
  }
  fs.writeFileSync(
    path.join(outDir, 'manifest.json'),
    JSON.stringify({ entries: manifestOut }, undefined, 2) + '\n',
  );
  fs.writeFileSync(
    path.join(outDir, 'extract_report.json'),
    JSON.stringify({ extracted: manifestOut.length, failures }, undefined, 2) + '\n',
  );
  process.stdout.write(`extracted ${manifestOut.length}/${entries.length} images\n`);
  if (failures.length) {
    for (const f of failures) process.stderr.write(`failed ${f.image_id}: ${f.error}\n`);
  }
  return manifestOut.length > 0 ? 0 : 1;
}

export function main(argv: string[]): number {
  const [command, ...rest] = argv;
  if (command === 'extract') {
    try {
      return extract(rest);
    } catch (err) {
      process.stderr.write(`error: ${String(err)}\n`);
      return 1;
    }
  }
  process.stderr.write('usage: cli.js extract --manifest m.json --out dir [--reduce D]\n');
  return 2;
}

if (process.argv[1] && (process.argv[1].endsWith('cli.js') || process.argv[1].endsWith('cli.ts'))) {
  process.exit(main(process.argv.slice(2)));
}
