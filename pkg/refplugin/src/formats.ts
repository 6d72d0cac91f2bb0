/**
 * Minimal reader/writer for the host's JSON dialect (../docs/formats.md):
 * manifests in, detection sets out.
 */

import { readFileSync, writeFileSync, mkdirSync } from 'node:fs';
import { dirname } from 'node:path';

export interface ImageRecord {
  image_id: string;
  file_path: string;
  width: number;
  height: number;
}

export interface Manifest {
  dataset_id: string;
  images: ImageRecord[];
}

export interface Detection {
  image_id: string;
  bbox: [number, number, number, number];
  score: number;
}

export function loadManifest(path: string): Manifest {
  const doc = JSON.parse(readFileSync(path, 'utf-8'));
  if (doc.format_version !== 1 || doc.kind !== 'manifest') {
    throw new Error(`${path}: not a format_version-1 manifest`);
  }
  if (typeof doc.dataset_id !== 'string' || !Array.isArray(doc.images)) {
    throw new Error(`${path}: missing dataset_id or images`);
  }
  for (const rec of doc.images) {
    if (
      typeof rec.image_id !== 'string' ||
      typeof rec.file_path !== 'string' ||
      !(rec.width > 0) ||
      !(rec.height > 0)
    ) {
      throw new Error(`${path}: malformed image record ${JSON.stringify(rec)}`);
    }
  }
  return { dataset_id: doc.dataset_id, images: doc.images };
}

/** Writes detections sorted by (image_id, -score, bbox): the canonical file order. */
export function saveDetections(
  path: string,
  manifestRef: string,
  producer: string,
  detections: Detection[],
): void {
  const ordered = [...detections].sort((a, b) => {
    if (a.image_id !== b.image_id) return a.image_id < b.image_id ? -1 : 1;
    if (a.score !== b.score) return b.score - a.score;
    for (let i = 0; i < 4; i++) {
      if (a.bbox[i] !== b.bbox[i]) return a.bbox[i] - b.bbox[i];
    }
    return 0;
  });
  const doc = {
    format_version: 1,
    kind: 'detections',
    manifest_ref: manifestRef,
    producer,
    detections: ordered,
  };
  mkdirSync(dirname(path), { recursive: true });
  writeFileSync(path, JSON.stringify(doc, null, 2) + '\n', 'utf-8');
}
