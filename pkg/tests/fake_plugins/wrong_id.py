#!/usr/bin/env python3
"""Misbehaving plugin: handshakes correctly, then echoes the wrong id."""
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
request = json.loads(sys.stdin.readline())
reply({"id": request["id"] + 100, "status": "ok", "payload": {}})
