#!/usr/bin/env python3
"""Misbehaving plugin: conforms on the wire but writes an out-of-range score."""
import json
import sys


def reply(obj):
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


hello = json.loads(sys.stdin.readline())
reply(
    {
        "id": hello["id"],
        "status": "ok",
        "payload": {"protocol_version": 1, "capabilities": ["infer", "train"]},
    }
)
while True:
    line = sys.stdin.readline()
    if not line:
        break
    request = json.loads(line)
    if request["command"] == "shutdown":
        reply({"id": request["id"], "status": "ok", "payload": {}})
        break
    out = request["payload"]["output_path"]
    with open(out, "w") as f:
        json.dump(
            {
                "format_version": 1,
                "kind": "detections",
                "manifest_ref": "conformance-empty",
                "producer": "bad",
                "detections": [
                    {"image_id": "ghost", "bbox": [0, 0, 10, 10], "score": 1.4}
                ],
            },
            f,
        )
    reply({"id": request["id"], "status": "ok", "payload": {"detections_path": out}})
