export { FeatureImage, decodeGsfm, encodeGsfm, validateGsfm } from './gsfm.js';
export { RgbImage, decodeImage, encodePpm } from './image.js';
export { DEFAULT_SPEC, ModelSpec, VitEncoder, upsampleToImage } from './vit.js';
export {
  Reduction,
  applyReduction,
  decodeReduction,
  encodeReduction,
  fitReduction,
} from './reduce.js';
export { extract, main } from './cli.js';
