import base64
import json
import subprocess
import sys

import numpy as np
import pytest

SERVER = [sys.executable, "-m", "scorer_adapter"]


class Pipe:
    """One stdio server process, line-by-line request/response."""

    def __init__(self, extra_args=()):
        self.proc = subprocess.Popen(
            SERVER + list(extra_args),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
        )

    def ask_raw(self, line: bytes) -> bytes:
        assert b"\n" not in line
        self.proc.stdin.write(line + b"\n")
        self.proc.stdin.flush()
        reply = self.proc.stdout.readline()
        assert reply.endswith(b"\n"), "server went away: %r" % (reply,)
        return reply[:-1]

    def ask(self, obj) -> dict:
        return json.loads(self.ask_raw(json.dumps(obj).encode()))

    def close(self):
        self.proc.stdin.close()
        self.proc.wait(timeout=30)


@pytest.fixture(scope="module")
def pipe():
    p = Pipe()
    yield p
    p.close()
    assert p.proc.returncode == 0


def tile_bytes(seed: int, side: int = 224) -> bytes:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, side * side * 3, dtype=np.uint8).tobytes()


def tile_msg(seed: int, label=None, side: int = 224, nbytes=None) -> dict:
    data = tile_bytes(seed, side)
    if nbytes is not None:
        data = data[:nbytes]
    msg = {
        "id": "t%05d" % seed,
        "w": side,
        "h": side,
        "rgb_b64": base64.b64encode(data).decode(),
    }
    if label is not None:
        msg["label"] = label
    return msg


def train_request(model_id="m1", n=8, seed=7, epochs=2):
    return {
        "op": "train",
        "model_id": model_id,
        "tiles": [tile_msg(i, label=i % 2) for i in range(n)],
        "config": {
            "seed": seed,
            "epochs": epochs,
            "batch_size": 4,
            "learning_rate": 0.1,
        },
    }


def golden_requests():
    """Raw request lines of the frozen transcript, in order.

    Requests are regenerated from code; only the response bytes are frozen.
    The sequence exercises train, score on seen and unseen tiles, retrain
    determinism, model replacement, and one instance of each error family.
    """
    requests = [
        {"op": "ping"},
        train_request("golden-a", n=4, seed=7),
        {"op": "score", "model_id": "golden-a", "tile": tile_msg(50)},
        {"op": "score", "model_id": "golden-a", "tile": tile_msg(0)},
        train_request("golden-b", n=4, seed=8),
        {"op": "score", "model_id": "golden-b", "tile": tile_msg(50)},
        train_request("golden-a", n=4, seed=7),
        {"op": "score", "model_id": "golden-a", "tile": tile_msg(50)},
        {"op": "score", "model_id": "golden-a", "tile": tile_msg(2, side=100)},
        {"op": "score", "model_id": "missing", "tile": tile_msg(50)},
        {"op": "ping"},
    ]
    lines = [json.dumps(r).encode() for r in requests]
    lines.insert(9, b"this line is not json")
    return lines
