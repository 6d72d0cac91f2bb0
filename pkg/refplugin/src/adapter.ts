/**
 * Adapter loading: `--model <path-to-module.mjs>` imports a module exporting
 * `createDetector({ stateDir }) => DetectorModel`, the seam where a real
 * pretrained detector (tfjs, onnxruntime, a GPU service client, ...) plugs in.
 * See adapters/example-adapter.mjs for the skeleton.
 */

import { pathToFileURL } from 'node:url';
import { resolve } from 'node:path';

import { DetectorModel } from './model.js';
import { StubDetector } from './stub.js';

export async function loadModel(spec: string, stateDir: string): Promise<DetectorModel> {
  if (spec === 'stub') {
    return new StubDetector(stateDir);
  }
  const module = await import(pathToFileURL(resolve(spec)).href);
  if (typeof module.createDetector !== 'function') {
    throw new Error(`adapter ${spec} does not export createDetector()`);
  }
  const model = await module.createDetector({ stateDir });
  for (const method of ['infer', 'train', 'saveCheckpoint', 'loadCheckpoint'] as const) {
    if (typeof model[method] !== 'function') {
      throw new Error(`adapter ${spec} is missing ${method}()`);
    }
  }
  return model as DetectorModel;
}
