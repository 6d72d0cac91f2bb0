"""Line-delimited JSON protocol between the orchestrator and detector plugins.

A plugin is a child process: requests arrive on its stdin, responses leave on
its stdout, logs belong on stderr. Every frame is a single line of UTF-8 JSON
terminated by a newline; a frame including its newline may not exceed
MAX_FRAME_BYTES. Large data (manifests, detections, annotations) always
travels by file path, never inline.

Requests carry a strictly increasing integer id; the matching response echoes
it. Exactly one response per request, no pipelining. The id may be null only
in an error response to a request the plugin could not decode.

See docs/protocol.md for the field-by-field contract and
docs/protocol_vectors.json for the conformance frames.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import shlex
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from typing import Any, BinaryIO, Callable, Mapping, Sequence

from .errors import (
    ContractViolationError,
    PluginError,
    ProtocolError,
    ProtocolTimeoutError,
    SelfDistillError,
    VersionMismatchError,
)
from .formats import DatasetManifest, DetectionSet, load_detections, load_manifest

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 64 * 1024
COMMANDS = ("hello", "infer", "train", "save_checkpoint", "load_checkpoint", "shutdown")

PLUGIN_LOG_ENV = "SELFDISTILL_PLUGIN_LOG"

log = logging.getLogger(__name__)


def plugin_log_level(default: str = "warning") -> int:
    """Log level for plugin stderr output, from the SELFDISTILL_PLUGIN_LOG env var."""
    name = os.environ.get(PLUGIN_LOG_ENV, default).strip().lower()
    return {
        "debug": logging.DEBUG,
        "info": logging.INFO,
        "warning": logging.WARNING,
        "error": logging.ERROR,
    }.get(name, logging.WARNING)


# ---------------------------------------------------------------------------
# Frame codec


def encode_frame(obj: Mapping[str, Any]) -> bytes:
    """Serialize one frame, enforcing the single-line and size limits."""
    data = json.dumps(obj, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    if b"\n" in data:
        raise ProtocolError("frame must not contain a raw newline", kind="schema")
    if len(data) + 1 > MAX_FRAME_BYTES:
        raise ProtocolError(
            f"frame of {len(data) + 1} bytes exceeds the {MAX_FRAME_BYTES}-byte limit",
            kind="oversize",
        )
    return data + b"\n"


def check_frame_size(line: bytes) -> None:
    if len(line) > MAX_FRAME_BYTES:
        raise ProtocolError(
            f"frame of {len(line)} bytes exceeds the {MAX_FRAME_BYTES}-byte limit",
            kind="oversize",
        )


def _parse_line(line: bytes | str) -> dict:
    if isinstance(line, bytes):
        check_frame_size(line)
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"frame is not valid UTF-8: {exc}", kind="parse") from exc
    text = line.strip("\n")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        excerpt = text if len(text) <= 120 else text[:117] + "..."
        raise ProtocolError(f"frame is not valid JSON: {excerpt!r}", kind="parse") from exc
    if not isinstance(obj, dict):
        raise ProtocolError(f"frame must be a JSON object, got {type(obj).__name__}", kind="schema")
    return obj


def decode_request(line: bytes | str) -> dict:
    """Validate and return a request frame {id, command, payload}."""
    obj = _parse_line(line)
    req_id = obj.get("id")
    if not isinstance(req_id, int) or isinstance(req_id, bool) or req_id < 1:
        raise ProtocolError(f"request id must be an integer >= 1, got {req_id!r}", kind="schema")
    command = obj.get("command")
    if command not in COMMANDS:
        raise ProtocolError(f"unknown command {command!r}", kind="schema")
    payload = obj.get("payload", {})
    if not isinstance(payload, dict):
        raise ProtocolError(f"payload must be an object, got {payload!r}", kind="schema")
    return {"id": req_id, "command": command, "payload": payload}


def decode_response(line: bytes | str) -> dict:
    """Validate and return a response frame {id, status, payload, error_message}."""
    obj = _parse_line(line)
    status = obj.get("status")
    if status not in ("ok", "error"):
        raise ProtocolError(f"response status must be 'ok' or 'error', got {status!r}", kind="schema")
    resp_id = obj.get("id")
    id_ok = isinstance(resp_id, int) and not isinstance(resp_id, bool) and resp_id >= 1
    if not id_ok and not (resp_id is None and status == "error"):
        raise ProtocolError(
            f"response id must be an integer >= 1 (null only on error), got {resp_id!r}",
            kind="schema",
        )
    payload = obj.get("payload", {})
    if not isinstance(payload, dict):
        raise ProtocolError(f"payload must be an object, got {payload!r}", kind="schema")
    message = obj.get("error_message")
    if status == "error" and not isinstance(message, str):
        raise ProtocolError("error response requires a string error_message", kind="schema")
    return {"id": resp_id, "status": status, "payload": payload, "error_message": message}


# ---------------------------------------------------------------------------
# Host side


@dataclass(frozen=True)
class TrainPayload:
    """Arguments of one fine-tuning call; hyperparameters pass through opaquely."""

    annotations_path: str
    manifest_path: str
    num_batches: int
    hyperparameters: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_batches < 1:
            raise ContractViolationError(f"num_batches must be >= 1, got {self.num_batches}")

    def to_json_dict(self) -> dict:
        return {
            "annotations_path": self.annotations_path,
            "manifest_path": self.manifest_path,
            "num_batches": self.num_batches,
            "hyperparameters": dict(self.hyperparameters),
        }


class _StdoutReader(threading.Thread):
    """Pulls frames off the plugin's stdout so reads can be bounded by timeouts."""

    def __init__(self, stream: BinaryIO):
        super().__init__(daemon=True)
        self._stream = stream
        self.lines: queue.Queue[tuple[str, bytes]] = queue.Queue()

    def run(self):
        while True:
            try:
                chunk = self._stream.readline(MAX_FRAME_BYTES + 1)
            except (OSError, ValueError):
                chunk = b""
            if not chunk:
                self.lines.put(("eof", b""))
                return
            if not chunk.endswith(b"\n") and len(chunk) > MAX_FRAME_BYTES:
                self.lines.put(("oversize", chunk[:80]))
                return
            self.lines.put(("line", chunk))


class PluginSession:
    """A serialized request/response channel to one detector plugin process.

    One session owns one child process; requests are strictly sequential and
    every read is bounded by a watchdog timeout, so a crashed or wedged plugin
    surfaces as an error rather than a hang.
    """

    def __init__(
        self,
        command: Sequence[str],
        process: subprocess.Popen,
        timeout: float,
        train_timeout: float,
    ):
        self.command = list(command)
        self.process = process
        self.timeout = timeout
        self.train_timeout = train_timeout
        self.protocol_version: int | None = None
        self.capabilities: tuple[str, ...] = ()
        self.plugin_name = ""
        self._next_id = 1
        self._reader = _StdoutReader(process.stdout)
        self._reader.start()

    @classmethod
    def open(
        cls,
        command: Sequence[str] | str,
        environment: Mapping[str, str] | None = None,
        timeout: float = 30.0,
        train_timeout: float = 3600.0,
    ) -> "PluginSession":
        """Launch the plugin and perform the hello handshake."""
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        env = dict(os.environ)
        if environment:
            env.update(environment)
        try:
            process = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=None,
                env=env,
            )
        except OSError as exc:
            raise ProtocolError(f"cannot launch plugin {argv!r}: {exc}", kind="launch") from exc
        session = cls(argv, process, timeout, train_timeout)
        try:
            payload = session._request("hello", {"protocol_version": PROTOCOL_VERSION})
        except SelfDistillError:
            session.close()
            raise
        version = payload.get("protocol_version")
        if version != PROTOCOL_VERSION:
            session.close()
            raise VersionMismatchError(
                f"plugin advertises protocol version {version!r}, host requires {PROTOCOL_VERSION}"
            )
        session.protocol_version = version
        caps = payload.get("capabilities", [])
        session.capabilities = tuple(caps) if isinstance(caps, list) else ()
        session.plugin_name = str(payload.get("name", ""))
        return session

    # -- plumbing

    def _read_response(self, timeout: float) -> dict:
        try:
            kind, data = self._reader.lines.get(timeout=timeout)
        except queue.Empty:
            self.close()
            raise ProtocolTimeoutError(
                f"plugin did not respond within {timeout:g}s; process killed"
            ) from None
        if kind == "eof":
            code = self.process.poll()
            raise ProtocolError(
                f"plugin closed its stdout (exit code {code}) before responding", kind="crash"
            )
        if kind == "oversize":
            self.close()
            raise ProtocolError(
                f"plugin sent a frame over {MAX_FRAME_BYTES} bytes (starts {data!r})",
                kind="oversize",
            )
        try:
            return decode_response(data)
        except ProtocolError:
            self.close()
            raise

    def _request(self, command: str, payload: Mapping[str, Any], timeout: float | None = None) -> dict:
        if self.process.poll() is not None:
            raise ProtocolError(
                f"plugin process already exited with code {self.process.returncode}", kind="crash"
            )
        request_id = self._next_id
        self._next_id += 1
        frame = encode_frame({"id": request_id, "command": command, "payload": dict(payload)})
        try:
            self.process.stdin.write(frame)
            self.process.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ProtocolError(f"plugin closed stdin: {exc}", kind="crash") from exc
        response = self._read_response(self.timeout if timeout is None else timeout)
        if response["id"] is None:
            # legal only as an error reply to a frame the plugin could not decode
            raise PluginError(f"{command} rejected by plugin: {response['error_message']}")
        if response["id"] != request_id:
            self.close()
            raise ProtocolError(
                f"out-of-order response: expected id {request_id}, got {response['id']!r}",
                kind="id",
            )
        if response["status"] == "error":
            raise PluginError(f"{command} failed: {response['error_message']}")
        return response["payload"]

    def _require_capability(self, capability: str) -> None:
        if capability not in self.capabilities:
            raise ContractViolationError(
                f"plugin {self.plugin_name or self.command!r} lacks the {capability!r} capability"
            )

    # -- commands

    def infer(
        self,
        manifest_path: str,
        output_path: str,
        score_floor: float = 0.0,
        seed: int | None = None,
        timeout: float | None = None,
    ) -> DetectionSet:
        """Run inference over a manifest; returns the validated detection set.

        The plugin writes its detections to output_path; the host reloads the
        file, validates it against the manifest, and re-applies score_floor.
        """
        self._require_capability("infer")
        payload: dict[str, Any] = {
            "manifest_path": str(manifest_path),
            "output_path": str(output_path),
            "score_floor": score_floor,
        }
        if seed is not None:
            payload["seed"] = seed
        result = self._request("infer", payload, timeout=timeout)
        detections_path = result.get("detections_path", str(output_path))
        manifest = load_manifest(manifest_path)
        try:
            detections = load_detections(detections_path, manifest=manifest)
        except SelfDistillError as exc:
            raise PluginError(f"plugin produced an invalid detection file: {exc}") from exc
        if score_floor > 0.0:
            detections = DetectionSet(
                manifest_ref=detections.manifest_ref,
                detections=tuple(d for d in detections.detections if d.score >= score_floor),
                producer=detections.producer,
            )
        return detections

    def train(self, payload: TrainPayload, timeout: float | None = None) -> str:
        """Fine-tune for payload.num_batches batches; returns the new checkpoint id."""
        self._require_capability("train")
        if not os.path.exists(payload.annotations_path):
            raise ContractViolationError(f"annotation file {payload.annotations_path!r} does not exist")
        result = self._request(
            "train", payload.to_json_dict(), timeout=self.train_timeout if timeout is None else timeout
        )
        checkpoint_id = result.get("checkpoint_id")
        if not isinstance(checkpoint_id, str) or not checkpoint_id:
            raise PluginError(f"train returned no checkpoint_id (payload {result!r})")
        return checkpoint_id

    def save_checkpoint(self, timeout: float | None = None) -> str:
        result = self._request("save_checkpoint", {}, timeout=timeout)
        checkpoint_id = result.get("checkpoint_id")
        if not isinstance(checkpoint_id, str) or not checkpoint_id:
            raise PluginError(f"save_checkpoint returned no checkpoint_id (payload {result!r})")
        return checkpoint_id

    def load_checkpoint(self, checkpoint_id: str, timeout: float | None = None) -> None:
        self._request("load_checkpoint", {"checkpoint_id": checkpoint_id}, timeout=timeout)

    def shutdown(self, timeout: float = 10.0) -> int:
        """Orderly shutdown; returns the plugin's exit code."""
        self._request("shutdown", {}, timeout=timeout)
        try:
            return self.process.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            self.close()
            raise ProtocolTimeoutError("plugin did not exit after shutdown; killed") from None

    def close(self) -> None:
        """Kill the plugin process if it is still alive."""
        if self.process.poll() is None:
            self.process.kill()
            try:
                self.process.wait(timeout=5)
            except subprocess.TimeoutExpired:
                pass
        if self.process.stdin:
            try:
                self.process.stdin.close()
            except OSError:
                pass

    def __enter__(self) -> "PluginSession":
        return self

    def __exit__(self, *exc_info) -> None:
        try:
            if self.process.poll() is None:
                self.shutdown()
        except SelfDistillError:
            pass
        finally:
            self.close()


# ---------------------------------------------------------------------------
# Plugin side

Handler = Callable[[dict], dict]


class PluginServer:
    """Single-threaded request loop for implementing a plugin in this package.

    Handles hello and shutdown itself; everything else dispatches to the
    supplied handlers. Undecodable or invalid frames produce an error response
    and the session continues; only shutdown (or EOF) ends the loop.
    """

    def __init__(
        self,
        name: str,
        handlers: Mapping[str, Handler],
        capabilities: Sequence[str] = ("infer", "train"),
        stdin: BinaryIO | None = None,
        stdout: BinaryIO | None = None,
    ):
        self.name = name
        self.handlers = dict(handlers)
        self.capabilities = tuple(capabilities)
        self._stdin = stdin if stdin is not None else sys.stdin.buffer
        self._stdout = stdout if stdout is not None else sys.stdout.buffer

    def _respond(self, response: dict) -> None:
        self._stdout.write(encode_frame(response))
        self._stdout.flush()

    def _error(self, request_id: int | None, message: str) -> None:
        self._respond(
            {"id": request_id, "status": "error", "payload": {}, "error_message": message}
        )

    def serve_forever(self) -> int:
        last_id = 0
        while True:
            chunk = self._stdin.readline(MAX_FRAME_BYTES + 1)
            if not chunk:
                log.warning("stdin closed without shutdown; exiting")
                return 0
            if not chunk.endswith(b"\n") and len(chunk) > MAX_FRAME_BYTES:
                # swallow the rest of the oversized line before continuing
                while True:
                    rest = self._stdin.readline(MAX_FRAME_BYTES + 1)
                    if not rest or rest.endswith(b"\n"):
                        break
                self._error(None, f"frame exceeds the {MAX_FRAME_BYTES}-byte limit")
                continue
            if not chunk.strip():
                continue
            try:
                request = decode_request(chunk)
            except ProtocolError as exc:
                self._error(None, str(exc))
                continue
            request_id = request["id"]
            if request_id <= last_id:
                self._error(
                    request_id,
                    f"request id {request_id} is not strictly increasing (last was {last_id})",
                )
                continue
            last_id = request_id
            command = request["command"]
            if command == "hello":
                self._respond(
                    {
                        "id": request_id,
                        "status": "ok",
                        "payload": {
                            "protocol_version": PROTOCOL_VERSION,
                            "capabilities": list(self.capabilities),
                            "name": self.name,
                        },
                    }
                )
                continue
            if command == "shutdown":
                self._respond({"id": request_id, "status": "ok", "payload": {}})
                return 0
            handler = self.handlers.get(command)
            if handler is None:
                self._error(request_id, f"command {command!r} not supported by this plugin")
                continue
            try:
                payload = handler(request["payload"])
            except SelfDistillError as exc:
                self._error(request_id, str(exc))
                continue
            except Exception as exc:  # a buggy handler must not kill the session
                log.exception("handler for %s raised", command)
                self._error(request_id, f"internal plugin error: {exc}")
                continue
            self._respond({"id": request_id, "status": "ok", "payload": payload})
