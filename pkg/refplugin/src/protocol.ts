/**
 * Wire protocol v1: newline-delimited JSON frames over stdin/stdout.
 * Field-by-field contract: ../docs/protocol.md.
 */

export const PROTOCOL_VERSION = 1;
export const MAX_FRAME_BYTES = 64 * 1024;

export const COMMANDS = [
  'hello',
  'infer',
  'train',
  'save_checkpoint',
  'load_checkpoint',
  'shutdown',
] as const;

export type Command = (typeof COMMANDS)[number];

export interface Request {
  id: number;
  command: Command;
  payload: Record<string, unknown>;
}

export interface Response {
  id: number | null;
  status: 'ok' | 'error';
  payload: Record<string, unknown>;
  error_message?: string;
}

export type FrameErrorKind = 'parse' | 'schema' | 'oversize';

export class FrameError extends Error {
  constructor(message: string, readonly kind: FrameErrorKind) {
    super(message);
    this.name = 'FrameError';
  }
}

function isPlainObject(value: unknown): value is Record<string, unknown> {
  return typeof value === 'object' && value !== null && !Array.isArray(value);
}

function parseLine(line: string): Record<string, unknown> {
  if (Buffer.byteLength(line, 'utf-8') + 1 > MAX_FRAME_BYTES) {
    throw new FrameError(
      `frame exceeds the ${MAX_FRAME_BYTES}-byte limit`,
      'oversize',
    );
  }
  let parsed: unknown;
  try {
    parsed = JSON.parse(line);
  } catch {
    const excerpt = line.length <= 120 ? line : `${line.slice(0, 117)}...`;
    throw new FrameError(`frame is not valid JSON: ${excerpt}`, 'parse');
  }
  if (!isPlainObject(parsed)) {
    throw new FrameError('frame must be a JSON object', 'schema');
  }
  return parsed;
}

export function decodeRequest(line: string): Request {
  const obj = parseLine(line);
  const id = obj['id'];
  if (typeof id !== 'number' || !Number.isInteger(id) || id < 1) {
    throw new FrameError(`request id must be an integer >= 1, got ${JSON.stringify(id)}`, 'schema');
  }
  const command = obj['command'];
  if (typeof command !== 'string' || !(COMMANDS as readonly string[]).includes(command)) {
    throw new FrameError(`unknown command ${JSON.stringify(command)}`, 'schema');
  }
  const payload = obj['payload'] ?? {};
  if (!isPlainObject(payload)) {
    throw new FrameError(`payload must be an object, got ${JSON.stringify(payload)}`, 'schema');
  }
  return { id, command: command as Command, payload };
}

export function decodeResponse(line: string): Response {
  const obj = parseLine(line);
  const status = obj['status'];
  if (status !== 'ok' && status !== 'error') {
    throw new FrameError(`response status must be 'ok' or 'error', got ${JSON.stringify(status)}`, 'schema');
  }
  const id = obj['id'];
  const idOk = typeof id === 'number' && Number.isInteger(id) && id >= 1;
  if (!idOk && !(id === null && status === 'error')) {
    throw new FrameError(
      `response id must be an integer >= 1 (null only on error), got ${JSON.stringify(id)}`,
      'schema',
    );
  }
  const payload = obj['payload'] ?? {};
  if (!isPlainObject(payload)) {
    throw new FrameError(`payload must be an object, got ${JSON.stringify(payload)}`, 'schema');
  }
  const message = obj['error_message'];
  if (status === 'error' && typeof message !== 'string') {
    throw new FrameError('error response requires a string error_message', 'schema');
  }
  return {
    id: (idOk ? id : null) as number | null,
    status,
    payload,
    error_message: typeof message === 'string' ? message : undefined,
  };
}

export function encodeResponse(response: Response): string {
  const frame = JSON.stringify(response);
  if (Buffer.byteLength(frame, 'utf-8') + 1 > MAX_FRAME_BYTES) {
    throw new FrameError(`response frame exceeds the ${MAX_FRAME_BYTES}-byte limit`, 'oversize');
  }
  return frame + '\n';
}
