/**
 * Live-session conformance of the built plugin (dist/plugin.js), mirroring
 * the host-side conformance suite: handshake, invalid frames, out-of-order
 * ids, inference on empty and populated manifests, checkpoint persistence
 * across a restart, orderly shutdown.
 */

import { ChildProcess, spawn } from 'node:child_process';
import { mkdtempSync, readFileSync, rmSync, writeFileSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { dirname, join } from 'node:path';
import { createInterface, Interface } from 'node:readline';
import { fileURLToPath } from 'node:url';

import { afterEach, describe, expect, it } from 'vitest';

const HERE = dirname(fileURLToPath(import.meta.url));
const PLUGIN = join(HERE, '..', 'dist', 'plugin.js');
const VECTORS = join(HERE, '..', '..', 'docs', 'protocol_vectors.json');

class PluginHandle {
  private readonly child: ChildProcess;
  private readonly reader: Interface;
  private readonly pending: string[] = [];
  private waiter: ((line: string) => void) | null = null;

  constructor(stateDir: string) {
    this.child = spawn(process.execPath, [PLUGIN, '--model', 'stub', '--state-dir', stateDir], {
      stdio: ['pipe', 'pipe', 'inherit'],
    });
    this.reader = createInterface({ input: this.child.stdout! });
    this.reader.on('line', (line) => {
      if (this.waiter) {
        const resolve = this.waiter;
        this.waiter = null;
        resolve(line);
      } else {
        this.pending.push(line);
      }
    });
  }

  sendRaw(line: string): void {
    this.child.stdin!.write(line + '\n');
  }

  async read(timeoutMs = 10_000): Promise<any> {
    const line = await new Promise<string>((resolve, reject) => {
      if (this.pending.length) return resolve(this.pending.shift()!);
      const timer = setTimeout(() => reject(new Error('plugin response timed out')), timeoutMs);
      this.waiter = (value) => {
        clearTimeout(timer);
        resolve(value);
      };
    });
    return JSON.parse(line);
  }

  async request(id: number, command: string, payload: Record<string, unknown> = {}): Promise<any> {
    this.sendRaw(JSON.stringify({ id, command, payload }));
    return this.read();
  }

  exitCode(timeoutMs = 10_000): Promise<number | null> {
    return new Promise((resolve, reject) => {
      const timer = setTimeout(() => reject(new Error('plugin did not exit')), timeoutMs);
      this.child.on('exit', (code) => {
        clearTimeout(timer);
        resolve(code);
      });
    });
  }

  kill(): void {
    if (this.child.exitCode === null) this.child.kill('SIGKILL');
  }
}

const cleanups: Array<() => void> = [];

function tempDir(): string {
  const dir = mkdtempSync(join(tmpdir(), 'refplugin-session-'));
  cleanups.push(() => rmSync(dir, { recursive: true, force: true }));
  return dir;
}

afterEach(() => {
  while (cleanups.length) cleanups.pop()!();
});

function writeManifest(path: string, images: Array<Record<string, unknown>>): void {
  writeFileSync(
    path,
    JSON.stringify({
      format_version: 1,
      kind: 'manifest',
      dataset_id: 'session-world',
      images,
    }),
  );
}

describe('plugin session', () => {
  it('passes the full conformance script', async () => {
    const dir = tempDir();
    const plugin = new PluginHandle(join(dir, 'state'));
    cleanups.push(() => plugin.kill());

    // handshake
    const hello = await plugin.request(1, 'hello', { protocol_version: 1 });
    expect(hello.status).toBe('ok');
    expect(hello.payload.protocol_version).toBe(1);
    expect(hello.payload.capabilities).toEqual(expect.arrayContaining(['infer', 'train']));

    // every invalid request vector draws an error; the session survives
    const vectors = JSON.parse(readFileSync(VECTORS, 'utf-8')).frames;
    for (const frame of vectors) {
      if (frame.direction !== 'request' || frame.valid) continue;
      let line: string = frame.line;
      if (frame.pad_to) {
        const fill = frame.pad_to - (Buffer.byteLength(line, 'utf-8') - '<PAD>'.length);
        line = line.replace('<PAD>', 'x'.repeat(Math.max(fill, 1)));
      }
      plugin.sendRaw(line);
      const response = await plugin.read();
      expect(response.status, frame.name).toBe('error');
      expect(typeof response.error_message).toBe('string');
    }

    // out-of-order id
    expect((await plugin.request(100, 'hello')).status).toBe('ok');
    const stale = await plugin.request(99, 'hello');
    expect(stale.status).toBe('error');

    // infer over an empty manifest
    const emptyManifest = join(dir, 'empty.json');
    writeManifest(emptyManifest, []);
    const emptyOut = join(dir, 'empty_det.json');
    const inferEmpty = await plugin.request(101, 'infer', {
      manifest_path: emptyManifest,
      output_path: emptyOut,
      score_floor: 0,
      seed: 7,
    });
    expect(inferEmpty.status).toBe('ok');
    expect(inferEmpty.payload.n_detections).toBe(0);
    const emptyDoc = JSON.parse(readFileSync(emptyOut, 'utf-8'));
    expect(emptyDoc.kind).toBe('detections');
    expect(emptyDoc.detections).toEqual([]);

    // orderly shutdown, exit code 0
    const bye = await plugin.request(102, 'shutdown');
    expect(bye.status).toBe('ok');
    expect(await plugin.exitCode()).toBe(0);
  });

  it('infers deterministically and persists checkpoints across restarts', async () => {
    const dir = tempDir();
    const stateDir = join(dir, 'state');
    const manifestPath = join(dir, 'm.json');
    writeManifest(manifestPath, [
      { image_id: 'a', file_path: 'a.png', width: 640, height: 480 },
      { image_id: 'b', file_path: 'b.png', width: 640, height: 480 },
    ]);

    const first = new PluginHandle(stateDir);
    cleanups.push(() => first.kill());
    await first.request(1, 'hello', { protocol_version: 1 });
    const outOne = join(dir, 'one.json');
    const outTwo = join(dir, 'two.json');
    await first.request(2, 'infer', { manifest_path: manifestPath, output_path: outOne, score_floor: 0 });
    await first.request(3, 'infer', { manifest_path: manifestPath, output_path: outTwo, score_floor: 0 });
    const docOne = JSON.parse(readFileSync(outOne, 'utf-8'));
    expect(docOne.detections).toEqual(JSON.parse(readFileSync(outTwo, 'utf-8')).detections);
    expect(docOne.detections).toHaveLength(2);
    expect(docOne.manifest_ref).toBe('session-world');

    const trained = await plugin_train(first, 4, manifestPath);
    expect(trained).toBe('stub-1');
    expect((await first.request(5, 'save_checkpoint')).payload.checkpoint_id).toBe('stub-1');
    await first.request(6, 'shutdown');
    expect(await first.exitCode()).toBe(0);

    // a fresh process over the same state dir still knows the checkpoint
    const second = new PluginHandle(stateDir);
    cleanups.push(() => second.kill());
    await second.request(1, 'hello', { protocol_version: 1 });
    expect((await second.request(2, 'save_checkpoint')).payload.checkpoint_id).toBe('stub-1');
    const load = await second.request(3, 'load_checkpoint', { checkpoint_id: 'stub-0' });
    expect(load.status).toBe('ok');
    const missing = await second.request(4, 'load_checkpoint', { checkpoint_id: 'stub-9' });
    expect(missing.status).toBe('error');
    await second.request(5, 'shutdown');
    expect(await second.exitCode()).toBe(0);
  });
});

async function plugin_train(plugin: PluginHandle, id: number, manifestPath: string): Promise<string> {
  const response = await plugin.request(id, 'train', {
    annotations_path: manifestPath, // stub ignores contents; any existing file works
    manifest_path: manifestPath,
    num_batches: 100,
    hyperparameters: {},
  });
  expect(response.status).toBe('ok');
  return response.payload.checkpoint_id;
}
