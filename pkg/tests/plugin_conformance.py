"""Reusable protocol conformance checks, runnable against any plugin command.

Frame vectors come from docs/protocol_vectors.json; the live-session script
exercises handshake, malformed/oversize/out-of-order frames, an inference on
an empty manifest, and orderly shutdown. Every read is bounded, so a wedged
plugin fails fast instead of hanging the suite.
"""

from __future__ import annotations

import json
import queue
import subprocess
import threading
from pathlib import Path

from selfdistill.formats import DatasetManifest, load_detections, save_manifest

VECTORS_PATH = Path(__file__).resolve().parent.parent / "docs" / "protocol_vectors.json"

READ_TIMEOUT = 10.0


def load_vectors() -> list[dict]:
    doc = json.loads(VECTORS_PATH.read_text())
    assert doc["format_version"] == 1
    frames = []
    for frame in doc["frames"]:
        line = frame["line"]
        if "pad_to" in frame:
            fill = frame["pad_to"] - (len(line.encode()) - len("<PAD>"))
            line = line.replace("<PAD>", "x" * max(fill, 1))
        frames.append({**frame, "line": line})
    return frames


class RawPluginProcess:
    """Line-level access to a plugin child process with bounded reads."""

    def __init__(self, command: list[str]):
        self.process = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE
        )
        self._lines: queue.Queue[bytes] = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        while True:
            line = self.process.stdout.readline()
            if not line:
                self._lines.put(b"")
                return
            self._lines.put(line)

    def send_line(self, line: str | bytes) -> None:
        data = line.encode() if isinstance(line, str) else line
        self.process.stdin.write(data + b"\n")
        self.process.stdin.flush()

    def read_response(self, timeout: float = READ_TIMEOUT) -> dict:
        line = self._lines.get(timeout=timeout)
        assert line, "plugin closed stdout unexpectedly"
        return json.loads(line)

    def close(self, timeout: float = READ_TIMEOUT) -> int:
        try:
            return self.process.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            self.process.kill()
            raise


def run_session_conformance(command: list[str], workdir: Path) -> None:
    """Assert full live-session conformance of the plugin behind `command`."""
    plugin = RawPluginProcess(command)
    try:
        # 1. handshake
        plugin.send_line(json.dumps({"id": 1, "command": "hello", "payload": {"protocol_version": 1}}))
        response = plugin.read_response()
        assert response["status"] == "ok", response
        assert response["id"] == 1
        assert response["payload"]["protocol_version"] == 1
        assert {"infer", "train"} <= set(response["payload"]["capabilities"])

        # 2. every invalid request vector draws an error and the session survives
        for frame in load_vectors():
            if frame["direction"] != "request" or frame["valid"]:
                continue
            plugin.send_line(frame["line"])
            response = plugin.read_response()
            assert response["status"] == "error", (frame["name"], response)
            assert isinstance(response.get("error_message"), str) and response["error_message"]

        # 3. out-of-order id (strictly decreasing) is answered with an error
        plugin.send_line(json.dumps({"id": 100, "command": "hello", "payload": {}}))
        assert plugin.read_response()["status"] == "ok"
        plugin.send_line(json.dumps({"id": 99, "command": "hello", "payload": {}}))
        response = plugin.read_response()
        assert response["status"] == "error", response

        # 4. infer over an empty manifest produces an empty, loadable detection file
        manifest = DatasetManifest(dataset_id="conformance-empty", images=())
        manifest_path = workdir / "conformance_manifest.json"
        output_path = workdir / "conformance_detections.json"
        save_manifest(manifest, manifest_path)
        plugin.send_line(
            json.dumps(
                {
                    "id": 101,
                    "command": "infer",
                    "payload": {
                        "manifest_path": str(manifest_path),
                        "output_path": str(output_path),
                        "score_floor": 0.0,
                        "seed": 7,
                    },
                }
            )
        )
        response = plugin.read_response()
        assert response["status"] == "ok", response
        detections = load_detections(output_path, manifest=manifest)
        assert len(detections) == 0

        # 5. orderly shutdown with exit code 0
        plugin.send_line(json.dumps({"id": 102, "command": "shutdown", "payload": {}}))
        response = plugin.read_response()
        assert response["status"] == "ok", response
        assert plugin.close() == 0
    finally:
        if plugin.process.poll() is None:
            plugin.process.kill()
            plugin.process.wait(timeout=5)
