/**
 * What a detector backend must provide to be served over the wire protocol.
 *
 * The stub implements this directly; a real model plugs in via an adapter
 * module (see adapter.ts) exporting `createDetector(args) => DetectorModel`.
 */

import { Detection, Manifest } from './formats.js';

export interface InferOptions {
  scoreFloor: number;
  seed?: number;
}

export interface TrainRequest {
  annotationsPath: string;
  manifestPath: string;
  numBatches: number;
  hyperparameters: Record<string, unknown>;
}

export interface DetectorModel {
  readonly name: string;
  infer(manifest: Manifest, options: InferOptions): Detection[];
  train(request: TrainRequest): string;
  saveCheckpoint(): string;
  loadCheckpoint(checkpointId: string): void;
}
