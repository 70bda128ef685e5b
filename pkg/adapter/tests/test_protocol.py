"""Protocol behavior over a live stdio server, plus TCP mode and fuzz."""

import base64
import json
import socket
import subprocess
import sys

import numpy as np
import pytest

from conftest import SERVER, Pipe, tile_msg, train_request
from scorer_adapter.protocol import ERROR_CODES


def test_ping(pipe):
    assert pipe.ask({"op": "ping"}) == {"ok": True}


def test_train_then_score(pipe):
    reply = pipe.ask(train_request("m1"))
    assert reply["ok"] is True
    assert reply["model_id"] == "m1"
    assert len(reply["digest"]) == 64
    int(reply["digest"], 16)
    scored = pipe.ask({"op": "score", "model_id": "m1", "tile": tile_msg(50)})
    assert scored["model_id"] == "m1"
    assert scored["tile_id"] == "t00050"
    assert 0.0 <= scored["score"] <= 1.0
    again = pipe.ask({"op": "score", "model_id": "m1", "tile": tile_msg(50)})
    assert again == scored


def test_retrain_same_payload_same_digest(pipe):
    first = pipe.ask(train_request("m2"))
    second = pipe.ask(train_request("m2"))
    assert first == second


def test_score_before_train_is_unknown_model(pipe):
    reply = pipe.ask({"op": "score", "model_id": "never", "tile": tile_msg(1)})
    assert reply["error"] == "UNKNOWN_MODEL"


def test_small_tile_is_shape_mismatch(pipe):
    pipe.ask(train_request("m3"))
    reply = pipe.ask(
        {"op": "score", "model_id": "m3", "tile": tile_msg(2, side=100)}
    )
    assert reply["error"] == "SHAPE_MISMATCH"


def test_byte_count_disagreement_is_shape_mismatch(pipe):
    pipe.ask(train_request("m4"))
    reply = pipe.ask(
        {"op": "score", "model_id": "m4", "tile": tile_msg(3, nbytes=1000)}
    )
    assert reply["error"] == "SHAPE_MISMATCH"


def test_invalid_base64_is_bad_request(pipe):
    tile = {"id": "x", "w": 224, "h": 224, "rgb_b64": "!!not base64!!"}
    reply = pipe.ask({"op": "score", "model_id": "m4", "tile": tile})
    assert reply["error"] == "BAD_REQUEST"


def test_train_without_label_is_bad_request(pipe):
    reply = pipe.ask(
        {"op": "train", "model_id": "m5", "tiles": [tile_msg(1)], "config": {}}
    )
    assert reply["error"] == "BAD_REQUEST"
    assert "label" in reply["message"]


def test_train_with_empty_tiles_is_bad_request(pipe):
    reply = pipe.ask({"op": "train", "model_id": "m5", "tiles": [], "config": {}})
    assert reply["error"] == "BAD_REQUEST"


def test_illtyped_config_is_bad_request(pipe):
    req = train_request("m5")
    req["config"]["epochs"] = "many"
    assert pipe.ask(req)["error"] == "BAD_REQUEST"


def test_out_of_range_seed_is_bad_request(pipe):
    req = train_request("m5", n=1)
    req["config"]["seed"] = 2 ** 80
    assert pipe.ask(req)["error"] == "BAD_REQUEST"


def test_unknown_op_is_bad_request(pipe):
    assert pipe.ask({"op": "frobnicate"})["error"] == "BAD_REQUEST"


def test_non_json_line_is_bad_json(pipe):
    reply = json.loads(pipe.ask_raw(b"}{ garbage"))
    assert reply["error"] == "BAD_JSON"


def test_non_object_line_is_bad_json(pipe):
    reply = json.loads(pipe.ask_raw(b"[1, 2, 3]"))
    assert reply["error"] == "BAD_JSON"


def test_stream_alive_after_every_error(pipe):
    assert pipe.ask({"op": "ping"}) == {"ok": True}


def _fuzz_lines(rng, n=100):
    """Malformed request lines; none of them forms a valid request."""
    printable = np.frombuffer(bytes(range(32, 127)), dtype=np.uint8)
    valid_train = json.dumps(train_request("f", n=1)).encode()

    def pick(options):
        return options[int(rng.integers(0, len(options)))]

    lines = []
    while len(lines) < n:
        kind = len(lines) % 8
        if kind == 0:
            raw = bytes(rng.integers(0, 256, int(rng.integers(1, 200)), dtype=np.uint8))
            line = raw.replace(b"\n", b"_").replace(b"\r", b"_")
        elif kind == 1:
            cut = int(rng.integers(1, len(valid_train) - 1))
            line = valid_train[:cut]
        elif kind == 2:
            line = pick(["12.5", '"just a string"', "null", "true", "[1,[2]]"]).encode()
        elif kind == 3:
            op = pick([7, None, "", "TRAIN", "pong", ["ping"]])
            line = json.dumps({"op": op}).encode()
        elif kind == 4:
            tile = tile_msg(int(rng.integers(0, 5)))
            tile[pick(["id", "w", "h", "rgb_b64"])] = pick([None, -3, "x", [1]])
            line = json.dumps({"op": "score", "model_id": "f", "tile": tile}).encode()
        elif kind == 5:
            req = train_request("f", n=1)
            key = pick(["seed", "epochs", "batch_size", "learning_rate"])
            req["config"][key] = pick(["soon", [], {"a": 1}, None])
            line = json.dumps(req).encode()
        elif kind == 6:
            line = pick([b" ", b"", b"\t", b"{", b"}"])
        else:
            junk = "".join(chr(c) for c in rng.choice(printable, 40)) + "ø "
            line = junk.encode()
        lines.append(bytes(line))
    return lines


def test_hundred_fuzzed_requests_never_crash_the_server():
    pipe = Pipe()
    try:
        rng = np.random.default_rng(1234)
        for line in _fuzz_lines(rng):
            reply = json.loads(pipe.ask_raw(line))
            assert isinstance(reply, dict), line
            assert reply.get("error") in ERROR_CODES, (line, reply)
            assert isinstance(reply.get("message"), str)
        assert pipe.ask({"op": "ping"}) == {"ok": True}
    finally:
        pipe.close()
    assert pipe.proc.returncode == 0


def test_tcp_mode_shares_models_across_connections():
    proc = subprocess.Popen(
        SERVER + ["--tcp", "127.0.0.1:0"],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
    )
    try:
        banner = proc.stderr.readline().decode()
        assert banner.startswith("listening on ")
        host, port = banner.split()[-1].rsplit(":", 1)

        def connect():
            sock = socket.create_connection((host, int(port)), timeout=30)
            return sock, sock.makefile("rwb")

        sock_a, chan_a = connect()
        sock_b, chan_b = connect()

        def ask(chan, obj):
            chan.write(json.dumps(obj).encode() + b"\n")
            chan.flush()
            return json.loads(chan.readline())

        assert ask(chan_a, {"op": "ping"}) == {"ok": True}
        assert ask(chan_b, {"op": "ping"}) == {"ok": True}
        trained = ask(chan_a, train_request("shared", n=4))
        assert trained["ok"] is True
        scored = ask(chan_b, {"op": "score", "model_id": "shared", "tile": tile_msg(9)})
        assert scored["tile_id"] == "t00009"
        assert 0.0 <= scored["score"] <= 1.0
        for sock, chan in ((sock_a, chan_a), (sock_b, chan_b)):
            chan.close()
            sock.close()
    finally:
        proc.terminate()
        proc.wait(timeout=30)
