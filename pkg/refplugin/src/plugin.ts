/**
 * Reference detector plugin: protocol v1 over stdin/stdout.
 *
 *   node dist/plugin.js --model stub --state-dir /tmp/refplugin-state
 *   node dist/plugin.js --model ./adapters/example-adapter.mjs --state-dir ...
 *
 * Malformed frames, unknown commands, and non-increasing ids draw an error
 * response and the session continues; only shutdown (or stdin EOF) ends the
 * process. Logs go to stderr, gated by SELFDISTILL_PLUGIN_LOG.
 */

import { createInterface } from 'node:readline';
import process from 'node:process';

import { loadModel } from './adapter.js';
import { loadManifest, saveDetections } from './formats.js';
import { DetectorModel } from './model.js';
import {
  FrameError,
  PROTOCOL_VERSION,
  Request,
  Response,
  decodeRequest,
  encodeResponse,
} from './protocol.js';

const LOG_LEVELS: Record<string, number> = { debug: 10, info: 20, warning: 30, error: 40 };
const LOG_THRESHOLD = LOG_LEVELS[process.env['SELFDISTILL_PLUGIN_LOG'] ?? 'warning'] ?? 30;

function log(level: keyof typeof LOG_LEVELS, message: string): void {
  if (LOG_LEVELS[level] >= LOG_THRESHOLD) {
    process.stderr.write(`refplugin ${level}: ${message}\n`);
  }
}

function parseArgs(argv: string[]): { model: string; stateDir: string } {
  let model = 'stub';
  let stateDir = '';
  for (let i = 0; i < argv.length; i++) {
    if (argv[i] === '--model' && argv[i + 1]) model = argv[++i];
    else if (argv[i] === '--state-dir' && argv[i + 1]) stateDir = argv[++i];
  }
  if (!stateDir) {
    process.stderr.write('refplugin: --state-dir is required\n');
    process.exit(1);
  }
  return { model, stateDir };
}

function respond(response: Response): void {
  process.stdout.write(encodeResponse(response));
}

function fail(id: number | null, message: string): void {
  respond({ id, status: 'error', payload: {}, error_message: message });
}

function requireString(payload: Record<string, unknown>, field: string): string {
  const value = payload[field];
  if (typeof value !== 'string' || !value) {
    throw new Error(`payload field ${JSON.stringify(field)} must be a non-empty string`);
  }
  return value;
}

function handle(model: DetectorModel, request: Request): Record<string, unknown> {
  const payload = request.payload;
  switch (request.command) {
    case 'infer': {
      const manifestPath = requireString(payload, 'manifest_path');
      const outputPath = requireString(payload, 'output_path');
      const scoreFloor = typeof payload['score_floor'] === 'number' ? payload['score_floor'] : 0;
      const seed = typeof payload['seed'] === 'number' ? payload['seed'] : undefined;
      const manifest = loadManifest(manifestPath);
      const detections = model.infer(manifest, { scoreFloor, seed });
      saveDetections(
        outputPath,
        manifest.dataset_id,
        `refplugin-${model.name}@${model.saveCheckpoint()}`,
        detections,
      );
      return { detections_path: outputPath, n_detections: detections.length };
    }
    case 'train': {
      const numBatches = payload['num_batches'];
      if (typeof numBatches !== 'number' || !Number.isInteger(numBatches) || numBatches < 1) {
        throw new Error(`num_batches must be an integer >= 1, got ${JSON.stringify(numBatches)}`);
      }
      const hyper = payload['hyperparameters'];
      const checkpointId = model.train({
        annotationsPath: requireString(payload, 'annotations_path'),
        manifestPath: requireString(payload, 'manifest_path'),
        numBatches,
        hyperparameters: (hyper ?? {}) as Record<string, unknown>,
      });
      return { checkpoint_id: checkpointId };
    }
    case 'save_checkpoint':
      return { checkpoint_id: model.saveCheckpoint() };
    case 'load_checkpoint': {
      model.loadCheckpoint(requireString(payload, 'checkpoint_id'));
      return {};
    }
    default:
      throw new Error(`command ${request.command} not supported by this plugin`);
  }
}

export async function main(): Promise<number> {
  const args = parseArgs(process.argv.slice(2));
  const model = await loadModel(args.model, args.stateDir);
  log('info', `serving model ${model.name} (state in ${args.stateDir})`);

  let lastId = 0;
  const lines = createInterface({ input: process.stdin, crlfDelay: Number.POSITIVE_INFINITY });
  for await (const line of lines) {
    if (!line.trim()) continue;
    let request: Request;
    try {
      request = decodeRequest(line);
    } catch (error) {
      const message = error instanceof FrameError ? error.message : String(error);
      log('debug', `rejected frame: ${message}`);
      fail(null, message);
      continue;
    }
    if (request.id <= lastId) {
      fail(request.id, `request id ${request.id} is not strictly increasing (last was ${lastId})`);
      continue;
    }
    lastId = request.id;
    if (request.command === 'hello') {
      respond({
        id: request.id,
        status: 'ok',
        payload: {
          protocol_version: PROTOCOL_VERSION,
          capabilities: ['infer', 'train'],
          name: `refplugin-${model.name}`,
        },
      });
      continue;
    }
    if (request.command === 'shutdown') {
      respond({ id: request.id, status: 'ok', payload: {} });
      return 0;
    }
    try {
      respond({ id: request.id, status: 'ok', payload: handle(model, request) });
    } catch (error) {
      log('debug', `${request.command} failed: ${String(error)}`);
      fail(request.id, error instanceof Error ? error.message : String(error));
    }
  }
  log('warning', 'stdin closed without shutdown; exiting');
  return 0;
}

main().then(
  (code) => process.exit(code),
  (error) => {
    process.stderr.write(`refplugin: fatal: ${String(error)}\n`);
    process.exit(1);
  },
);
