"""Candidate side of the newline-delimited JSON wire protocol used by the test fixtures."""
import json
import sys


def emit(frame):
    sys.stdout.write(json.dumps(frame) + "\n")
    sys.stdout.flush()


def response(body):
    return {"type": "response", "body": body}


def error(kind, message=""):
    return {"type": "error", "kind": kind, "message": message}


def effect(kind, target, mutating=False):
    return {"type": "effect", "kind": kind, "target": target, "mutating": mutating}


def metrics(duration_ms=None, memory_mb=None):
    frame = {"type": "metrics"}
    if duration_ms is not None:
        frame["declared_duration_ms"] = duration_ms
    if memory_mb is not None:
        frame["peak_memory_mb"] = memory_mb
    return frame


def serve(handle):
    """Answer hello, then pass every request body to *handle* and emit its frames.

    *handle* returns a list of frames (without ``seq``); frames listed after
    the outcome frame are sent after it, which is how late effects are produced.
    """
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        msg = json.loads(line)
        if msg.get("type") == "hello":
            emit({"type": "hello", "wire_version": 1})
            continue
        seq = msg["seq"]
        for frame in handle(msg["body"]):
            emit({**frame, "seq": seq})
