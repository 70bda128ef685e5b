"""Request validation and dispatch for the line protocol.

One JSON object in, one JSON object out. Replies are either the op's
result or ``{"error": code, "message": text}`` with code one of BAD_JSON,
BAD_REQUEST, UNKNOWN_MODEL, SHAPE_MISMATCH, INTERNAL; the stream always
survives an error. The authoritative message schema lives with the harness
this adapter serves; this module enforces it field by field.
"""

import base64
import binascii
import json
import threading

import torch

from .model import DEFAULTS, TILE_SIDE, digest, score_tile, train_model

ERROR_CODES = ("BAD_JSON", "BAD_REQUEST", "UNKNOWN_MODEL", "SHAPE_MISMATCH",
               "INTERNAL")


class RequestError(Exception):
    def __init__(self, code: str, message: str):
        self.code = code
        self.message = message
        super().__init__(message)


class Session:
    """Models registered by every connection of one server process.

    Ids are dict keys, so registering an id again replaces that model.
    Training serializes on one lock because it consumes the global torch
    generator; scoring a registered model runs without it.
    """

    def __init__(self):
        self._models = {}
        self._lock = threading.Lock()
        self.train_lock = threading.Lock()

    def register(self, model_id, net):
        with self._lock:
            self._models[model_id] = net

    def lookup(self, model_id):
        with self._lock:
            try:
                return self._models[model_id]
            except KeyError:
                raise RequestError(
                    "UNKNOWN_MODEL", "no model registered as %r" % (model_id,)
                ) from None


def handle_line(session: Session, raw) -> str:
    """Map one request line to one response line (newline not included)."""
    try:
        reply = _dispatch(session, raw)
    except RequestError as err:
        reply = {"error": err.code, "message": err.message}
    except Exception as err:  # whatever happened, the stream stays alive
        reply = {"error": "INTERNAL",
                 "message": "%s: %s" % (type(err).__name__, err)}
    return json.dumps(reply, separators=(",", ":"))


def _dispatch(session, raw):
    try:
        msg = json.loads(raw)
    except ValueError:
        raise RequestError("BAD_JSON", "line is not valid JSON") from None
    if not isinstance(msg, dict):
        raise RequestError("BAD_JSON", "line is not a JSON object")
    op = msg.get("op")
    if op == "ping":
        return {"ok": True}
    if op == "train":
        return _train(session, msg)
    if op == "score":
        return _score(session, msg)
    raise RequestError("BAD_REQUEST", "unknown op %r" % (op,))


def _str_field(obj, key, where):
    value = obj.get(key)
    if not isinstance(value, str):
        raise RequestError("BAD_REQUEST", "%s needs a string %r" % (where, key))
    return value


def _int_of(value, key, where):
    if isinstance(value, bool) or not isinstance(value, int):
        raise RequestError("BAD_REQUEST", "%s: %r must be an integer" % (where, key))
    return value


def _config_of(msg):
    raw = msg.get("config", {})
    if not isinstance(raw, dict):
        raise RequestError("BAD_REQUEST", "config must be an object")
    config = dict(DEFAULTS)
    for key in ("seed", "epochs", "batch_size"):
        if key in raw:
            config[key] = _int_of(raw[key], key, "config")
    if "learning_rate" in raw:
        value = raw["learning_rate"]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise RequestError("BAD_REQUEST", "config: learning_rate must be a number")
        config["learning_rate"] = float(value)
    if not -(2 ** 63) <= config["seed"] < 2 ** 64:
        raise RequestError("BAD_REQUEST", "config: seed is out of range")
    if config["epochs"] < 0:
        raise RequestError("BAD_REQUEST", "config: epochs must be >= 0")
    if config["batch_size"] < 1:
        raise RequestError("BAD_REQUEST", "config: batch_size must be >= 1")
    return config


def _decode_tile(obj, need_label):
    if not isinstance(obj, dict):
        raise RequestError("BAD_REQUEST", "tile must be an object")
    tile_id = _str_field(obj, "id", "tile")
    where = "tile %r" % (tile_id,)
    w = _int_of(obj.get("w"), "w", where)
    h = _int_of(obj.get("h"), "h", where)
    if w <= 0 or h <= 0:
        raise RequestError("BAD_REQUEST", "%s: w and h must be positive" % where)
    encoded = _str_field(obj, "rgb_b64", where)
    try:
        raw = base64.b64decode(encoded, validate=True)
    except (binascii.Error, ValueError):
        raise RequestError(
            "BAD_REQUEST", "%s: rgb_b64 is not valid base64" % where
        ) from None
    if len(raw) != w * h * 3:
        raise RequestError(
            "SHAPE_MISMATCH",
            "%s: rgb_b64 holds %d bytes, w*h*3 is %d" % (where, len(raw), w * h * 3),
        )
    if w != TILE_SIDE or h != TILE_SIDE:
        raise RequestError(
            "SHAPE_MISMATCH",
            "%s: got %dx%d, the contract is %dx%d"
            % (where, w, h, TILE_SIDE, TILE_SIDE),
        )
    rgb = torch.frombuffer(bytearray(raw), dtype=torch.uint8).reshape(h, w, 3)
    label = None
    if need_label:
        value = obj.get("label")
        if isinstance(value, bool) or value not in (0, 1):
            raise RequestError("BAD_REQUEST", "%s: label must be 0 or 1" % where)
        label = value
    return tile_id, rgb, label


def _train(session, msg):
    model_id = _str_field(msg, "model_id", "train")
    tiles = msg.get("tiles")
    if not isinstance(tiles, list) or not tiles:
        raise RequestError("BAD_REQUEST", "train needs a non-empty tiles list")
    config = _config_of(msg)
    rgbs = []
    labels = []
    for obj in tiles:
        _, rgb, label = _decode_tile(obj, need_label=True)
        rgbs.append(rgb)
        labels.append(label)
    with session.train_lock:
        net = train_model(
            torch.stack(rgbs), torch.tensor(labels, dtype=torch.float32), config
        )
        fingerprint = digest(net)
    session.register(model_id, net)
    return {"ok": True, "model_id": model_id, "digest": fingerprint}


def _score(session, msg):
    model_id = _str_field(msg, "model_id", "score")
    net = session.lookup(model_id)
    tile_id, rgb, _ = _decode_tile(msg.get("tile"), need_label=False)
    return {"model_id": model_id, "tile_id": tile_id, "score": score_tile(net, rgb)}
