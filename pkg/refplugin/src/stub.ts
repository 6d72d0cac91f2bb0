/**
 * The stub detector: one deterministic box per image, derived purely from the
 * image_id hash and the declared dimensions. Training is a no-op that bumps a
 * counter persisted in the state directory, so checkpoint ids survive
 * restarts.
 */

import { readFileSync, writeFileSync, mkdirSync, existsSync } from 'node:fs';
import { join } from 'node:path';

import { Detection, Manifest } from './formats.js';
import { DetectorModel, InferOptions, TrainRequest } from './model.js';

function fnv1a32(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return hash >>> 0;
}

export class StubDetector implements DetectorModel {
  readonly name = 'stub';
  private counter: number;
  private readonly counterPath: string;

  constructor(stateDir: string) {
    mkdirSync(stateDir, { recursive: true });
    this.counterPath = join(stateDir, 'stub_counter.json');
    this.counter = existsSync(this.counterPath)
      ? JSON.parse(readFileSync(this.counterPath, 'utf-8')).counter
      : 0;
  }

  private persist(): void {
    writeFileSync(this.counterPath, JSON.stringify({ counter: this.counter }) + '\n');
  }

  checkpointId(): string {
    return `stub-${this.counter}`;
  }

  infer(manifest: Manifest, options: InferOptions): Detection[] {
    const detections: Detection[] = [];
    for (const rec of manifest.images) {
      const hash = fnv1a32(rec.image_id);
      const size = Math.min(Math.max(Math.min(rec.width, rec.height) / 4, 8), 64);
      const x = ((hash % 1000) / 1000) * Math.max(rec.width - size, 0);
      const y = (((hash >>> 10) % 1000) / 1000) * Math.max(rec.height - size, 0);
      const score = 0.5 + (hash % 4096) / 8192;
      if (score >= options.scoreFloor) {
        detections.push({ image_id: rec.image_id, bbox: [x, y, size, size], score });
      }
    }
    return detections;
  }

  train(_request: TrainRequest): string {
    this.counter += 1;
    this.persist();
    return this.checkpointId();
  }

  saveCheckpoint(): string {
    this.persist();
    return this.checkpointId();
  }

  loadCheckpoint(checkpointId: string): void {
    const match = /^stub-(\d+)$/.exec(checkpointId);
    if (!match || Number(match[1]) > this.counter) {
      throw new Error(`unknown checkpoint ${JSON.stringify(checkpointId)}`);
    }
    // weights never change; restoring a checkpoint only rewinds the counter
    this.counter = Number(match[1]);
    this.persist();
  }
}
