"""Tile scoring: a built-in trainable scorer and a client for external ones.

Both back ends satisfy the same contract: train a model on labeled tiles,
then map any tile to a score in [0, 1]. The built-in scorer is a logistic
model over fixed image features, small enough to train per sweep level in
well under a second. External scorers (deep models, other runtimes) attach
over a newline-delimited JSON protocol; the section below is the protocol's
authoritative definition and the adapter packages implement against it.

Wire protocol
-------------
Transport is a byte stream: either a TCP connection or a child process
speaking over stdin/stdout. Each message is one JSON object on one line,
UTF-8, terminated by "\\n". The client sends requests; the server answers
each request with exactly one line, in order.

Requests and responses::

    {"op": "ping"}
        -> {"ok": true}
    {"op": "train", "model_id": s, "tiles": [TILE, ...], "config":
            {"seed": int, "epochs": int, "batch_size": int,
             "learning_rate": float}}
        -> {"ok": true, "model_id": s, "digest": s}
    {"op": "score", "model_id": s, "tile": TILE}
        -> {"model_id": s, "tile_id": s, "score": float}

    TILE = {"id": s, "label": 0|1, "w": 224, "h": 224, "rgb_b64": s}

``rgb_b64`` is standard base64 of the row-major RGB8 bytes (length must be
w*h*3). ``label`` is required for train tiles and ignored for score tiles.
``digest`` is the server's stable hash of the trained parameters.

On any failure the server answers ``{"error": code, "message": s}`` instead,
with code one of BAD_JSON (line was not a JSON object), BAD_REQUEST (missing
or ill-typed fields, unknown op), UNKNOWN_MODEL, SHAPE_MISMATCH (rgb_b64
length disagrees with w*h*3), INTERNAL. The server must keep the stream
alive after an error response.

Endpoint addresses: ``tcp:HOST:PORT`` connects a socket; ``cmd:COMMAND``
spawns COMMAND (split shell-style) and uses its stdio.
"""

from __future__ import annotations

import base64
import hashlib
import json
import shlex
import socket
import subprocess
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyEvaluation,
    ExternalUnavailable,
    InvalidSpec,
    SingleClassData,
    UnknownModel,
)
from .seeds import stream
from .tiling import Tile

__all__ = [
    "ScorerConfig",
    "ModelHandle",
    "tile_features",
    "FEATURE_NAMES",
    "train",
    "score",
    "score_many",
    "evaluate_accuracy",
    "batch_label_counts",
    "close_external_channels",
    "POSITIVE_LABEL",
    "NEGATIVE_LABEL",
]

POSITIVE_LABEL = "MetPos"
NEGATIVE_LABEL = "MetNeg"

# octave band edges in cycles/pixel for the spectral features
_BAND_EDGES = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1 / 2)
_N_SECTORS = 4

FEATURE_NAMES = tuple(
    [f"mean_{c}" for c in "rgb"]
    + [f"var_{c}" for c in "rgb"]
    + [
        f"band{b}_sector{s}"
        for b in range(len(_BAND_EDGES) - 1)
        for s in range(_N_SECTORS)
    ]
)


@dataclass(frozen=True)
class ScorerConfig:
    """Training knobs shared by both scorer back ends."""

    seed: int = 0
    epochs: int = 40
    batch_size: int = 200
    learning_rate: float = 0.5
    threshold: float = 0.5
    kind: str = "builtin"
    endpoint: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("builtin", "external"):
            raise InvalidSpec("scorer kind must be builtin or external, got %r"
                              % (self.kind,))
        if self.kind == "external" and not self.endpoint:
            raise InvalidSpec("external scorer needs an endpoint address")
        if self.batch_size < 2:
            raise InvalidSpec("batch_size must be at least 2")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidSpec("threshold must lie strictly inside (0, 1)")
        if self.epochs < 0:
            raise InvalidSpec("epochs must be non-negative")
        if not self.learning_rate > 0:
            raise InvalidSpec("learning_rate must be positive")


@dataclass(frozen=True)
class ModelHandle:
    """Opaque reference to a trained model.

    ``level_tag`` is the transform tag of the training tiles ("none" for
    raw tiles, "mixed" if they disagreed), so downstream bookkeeping can
    check a model is applied at the level it was trained for.
    """

    model_id: str
    kind: str
    level_tag: str
    seed: int
    digest: str
    endpoint: str | None = None


# ---------------------------------------------------------------------------
# features


@lru_cache(maxsize=8)
def _spectral_cells(shape: tuple[int, int]) -> np.ndarray:
    """Map each rfft2 bin to a (band, sector) cell index, -1 outside."""
    h, w = shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    r = np.hypot(fy, fx)
    band = np.searchsorted(_BAND_EDGES, r, side="left") - 1
    in_band = (r > _BAND_EDGES[0]) & (r <= _BAND_EDGES[-1])
    theta = np.mod(np.arctan2(fy, fx) + np.pi / (2 * _N_SECTORS), np.pi)
    sector = np.minimum((theta / (np.pi / _N_SECTORS)).astype(np.intp),
                        _N_SECTORS - 1)
    cells = np.where(in_band, band * _N_SECTORS + sector, -1)
    return cells.astype(np.intp)


def tile_features(pixels: np.ndarray) -> np.ndarray:
    """Fixed 22-vector of image statistics for one RGB tile.

    Three channel means, three channel variances (pixels scaled to [0, 1]),
    and the fraction of non-DC spectral power of the luma falling in each of
    four octave frequency bands crossed with four orientation sectors. The
    band fractions respond to texture scale, the moments to tone and color.
    """
    p = pixels.astype(np.float64) / 255.0
    means = p.mean(axis=(0, 1))
    vars_ = p.var(axis=(0, 1))
    luma = p @ np.array([0.299, 0.587, 0.114])
    spec = np.fft.rfft2(luma - luma.mean())
    power = np.abs(spec) ** 2
    cells = _spectral_cells(luma.shape)
    keep = cells >= 0
    band_power = np.bincount(cells[keep], weights=power[keep],
                             minlength=(len(_BAND_EDGES) - 1) * _N_SECTORS)
    fractions = band_power / (band_power.sum() + 1e-12)
    return np.concatenate([means, vars_, fractions])


def _feature_matrix(tiles: Sequence[Tile]) -> np.ndarray:
    return np.stack([tile_features(t.pixels) for t in tiles])


# ---------------------------------------------------------------------------
# built-in scorer


@dataclass
class _BuiltinModel:
    weights: np.ndarray
    bias: float
    feat_mean: np.ndarray
    feat_scale: np.ndarray
    batch_labels: list = field(default_factory=list)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.feat_mean, self.feat_scale, self.weights,
                    np.array([self.bias])):
            h.update(arr.astype("<f8").tobytes())
        return h.hexdigest()

    def logits(self, feats: np.ndarray) -> np.ndarray:
        z = (feats - self.feat_mean) / self.feat_scale
        return z @ self.weights + self.bias


_registry: dict[str, _BuiltinModel] = {}
_registry_lock = threading.Lock()
_model_seq = 0


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _level_tag_of(tiles: Sequence[Tile]) -> str:
    tags = {t.transform_tag for t in tiles}
    return tags.pop() if len(tags) == 1 else "mixed"


def _labels01(tiles: Sequence[Tile]) -> np.ndarray:
    return np.array([1 if t.label == POSITIVE_LABEL else 0 for t in tiles])


def _train_builtin(tiles: Sequence[Tile], config: ScorerConfig) -> ModelHandle:
    global _model_seq
    y = _labels01(tiles)
    pos_idx = np.flatnonzero(y == 1)
    neg_idx = np.flatnonzero(y == 0)
    if len(pos_idx) == 0 or len(neg_idx) == 0:
        raise SingleClassData("training data holds only one label")

    feats = _feature_matrix(tiles)
    mean = feats.mean(axis=0)
    scale = np.maximum(feats.std(axis=0), 1e-8)
    z = (feats - mean) / scale

    model = _BuiltinModel(weights=np.zeros(feats.shape[1]), bias=0.0,
                          feat_mean=mean, feat_scale=scale)
    rng = stream(config.seed, "predictor", "batches")
    half = config.batch_size // 2
    steps_per_epoch = max(1, -(-len(tiles) // config.batch_size))
    for _ in range(config.epochs):
        for _ in range(steps_per_epoch):
            # every batch carries both classes by construction
            take_p = rng.choice(pos_idx, size=half, replace=True)
            take_n = rng.choice(neg_idx, size=config.batch_size - half,
                                replace=True)
            batch = np.concatenate([take_p, take_n])
            zb, yb = z[batch], y[batch]
            p = _sigmoid(zb @ model.weights + model.bias)
            grad_w = zb.T @ (p - yb) / len(batch)
            grad_b = float(np.mean(p - yb))
            model.weights -= config.learning_rate * grad_w
            model.bias -= config.learning_rate * grad_b
            model.batch_labels.append((len(take_p), len(take_n)))

    digest = model.digest()
    with _registry_lock:
        _model_seq += 1
        model_id = "builtin-%04d-%s" % (_model_seq, digest[:8])
        _registry[model_id] = model
    return ModelHandle(model_id=model_id, kind="builtin",
                       level_tag=_level_tag_of(tiles), seed=config.seed,
                       digest=digest)


def _builtin_of(model: ModelHandle) -> _BuiltinModel:
    with _registry_lock:
        try:
            return _registry[model.model_id]
        except KeyError:
            raise UnknownModel("no model registered as %r" % (model.model_id,)) from None


def batch_label_counts(model: ModelHandle) -> list[tuple[int, int]]:
    """(positives, negatives) per training batch, built-in models only."""
    if model.kind != "builtin":
        raise UnknownModel("external models keep no local batch log")
    return list(_builtin_of(model).batch_labels)


# ---------------------------------------------------------------------------
# external scorer client


def _tile_message(tile: Tile, tile_id: str, with_label: bool) -> dict:
    h, w = tile.pixels.shape[:2]
    msg = {
        "id": tile_id,
        "w": int(w),
        "h": int(h),
        "rgb_b64": base64.b64encode(
            np.ascontiguousarray(tile.pixels).tobytes()).decode("ascii"),
    }
    if with_label:
        msg["label"] = 1 if tile.label == POSITIVE_LABEL else 0
    return msg


class _ExternalChannel:
    """One open byte stream to an external scorer."""

    def __init__(self, endpoint: str) -> None:
        self.endpoint = endpoint
        self.lock = threading.Lock()
        self.seq = 0
        self._proc = None
        self._sock = None
        try:
            if endpoint.startswith("tcp:"):
                host, _, port = endpoint[4:].rpartition(":")
                self._sock = socket.create_connection((host, int(port)), timeout=60)
                self._reader = self._sock.makefile("rb")
                self._writer = self._sock.makefile("wb")
            elif endpoint.startswith("cmd:"):
                self._proc = subprocess.Popen(
                    shlex.split(endpoint[4:]), stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE)
                self._reader = self._proc.stdout
                self._writer = self._proc.stdin
            else:
                raise ExternalUnavailable(
                    "endpoint must start with tcp: or cmd:, got %r" % (endpoint,))
        except ExternalUnavailable:
            raise
        except (OSError, ValueError) as exc:
            raise ExternalUnavailable(
                "cannot open scorer endpoint %r: %s" % (endpoint, exc)) from exc

    def request(self, payload: dict) -> dict:
        with self.lock:
            try:
                self._writer.write(json.dumps(payload).encode("utf-8") + b"\n")
                self._writer.flush()
                line = self._reader.readline()
            except (OSError, ValueError, BrokenPipeError) as exc:
                raise ExternalUnavailable(
                    "scorer endpoint %r died mid-request: %s"
                    % (self.endpoint, exc)) from exc
        if not line:
            raise ExternalUnavailable(
                "scorer endpoint %r closed the stream" % (self.endpoint,))
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ExternalUnavailable(
                "scorer endpoint %r sent a non-JSON line" % (self.endpoint,)) from exc
        if not isinstance(reply, dict):
            raise ExternalUnavailable(
                "scorer endpoint %r sent a non-object reply" % (self.endpoint,))
        if "error" in reply:
            code = reply.get("error")
            message = reply.get("message", "")
            if code == "UNKNOWN_MODEL":
                raise UnknownModel(message or "external scorer knows no such model")
            raise ExternalUnavailable(
                "scorer endpoint %r refused the request: %s %s"
                % (self.endpoint, code, message))
        return reply

    def close(self) -> None:
        for f in (getattr(self, "_writer", None), getattr(self, "_reader", None)):
            try:
                if f is not None:
                    f.close()
            except OSError:
                pass
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        if self._proc is not None:
            try:
                self._proc.terminate()
                self._proc.wait(timeout=10)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()


_channels: dict[str, _ExternalChannel] = {}
_channels_lock = threading.Lock()


def _channel_for(endpoint: str) -> _ExternalChannel:
    with _channels_lock:
        chan = _channels.get(endpoint)
        if chan is None:
            chan = _ExternalChannel(endpoint)
            _channels[endpoint] = chan
        return chan


def close_external_channels() -> None:
    """Close every open external scorer connection and forget it."""
    with _channels_lock:
        chans = list(_channels.values())
        _channels.clear()
    for chan in chans:
        chan.close()


def ping_external(endpoint: str) -> bool:
    """True when the endpoint answers a ping with {"ok": true}."""
    reply = _channel_for(endpoint).request({"op": "ping"})
    return reply.get("ok") is True


def _train_external(tiles: Sequence[Tile], config: ScorerConfig) -> ModelHandle:
    y = _labels01(tiles)
    if y.min() == y.max():
        raise SingleClassData("training data holds only one label")
    chan = _channel_for(config.endpoint)
    with chan.lock:
        chan.seq += 1
        model_id = "ext-%04d" % chan.seq
    payload = {
        "op": "train",
        "model_id": model_id,
        "tiles": [
            _tile_message(t, "t%05d" % i, with_label=True)
            for i, t in enumerate(tiles)
        ],
        "config": {
            "seed": config.seed,
            "epochs": config.epochs,
            "batch_size": config.batch_size,
            "learning_rate": config.learning_rate,
        },
    }
    reply = chan.request(payload)
    if reply.get("ok") is not True or reply.get("model_id") != model_id:
        raise ExternalUnavailable(
            "scorer endpoint %r broke the train contract: %r"
            % (config.endpoint, reply))
    return ModelHandle(model_id=model_id, kind="external",
                       level_tag=_level_tag_of(tiles), seed=config.seed,
                       digest=str(reply.get("digest", "")),
                       endpoint=config.endpoint)


def _score_external(model: ModelHandle, tile: Tile, tile_id: str) -> float:
    chan = _channel_for(model.endpoint)
    reply = chan.request({
        "op": "score",
        "model_id": model.model_id,
        "tile": _tile_message(tile, tile_id, with_label=False),
    })
    try:
        value = float(reply["score"])
    except (KeyError, TypeError, ValueError):
        raise ExternalUnavailable(
            "scorer endpoint %r broke the score contract: %r"
            % (model.endpoint, reply)) from None
    if not 0.0 <= value <= 1.0:
        raise ExternalUnavailable(
            "scorer endpoint %r returned score outside [0,1]: %r"
            % (model.endpoint, value))
    return value


# ---------------------------------------------------------------------------
# public operations


def train(tiles: Sequence[Tile], config: ScorerConfig) -> ModelHandle:
    """Fit a scorer on labeled tiles; deterministic given seed and order."""
    tiles = list(tiles)
    if not tiles:
        raise SingleClassData("no training tiles")
    if config.kind == "external":
        return _train_external(tiles, config)
    return _train_builtin(tiles, config)


def score(model: ModelHandle, tile: Tile) -> float:
    """Score one tile in [0, 1]."""
    if model.kind == "external":
        return _score_external(model, tile, "q00000")
    m = _builtin_of(model)
    return float(_sigmoid(m.logits(tile_features(tile.pixels)[None, :]))[0])


def score_many(model: ModelHandle, tiles: Sequence[Tile]) -> np.ndarray:
    """Scores for a batch of tiles, in input order."""
    tiles = list(tiles)
    if not tiles:
        return np.zeros(0)
    if model.kind == "external":
        return np.array([
            _score_external(model, t, "q%05d" % i) for i, t in enumerate(tiles)
        ])
    m = _builtin_of(model)
    return _sigmoid(m.logits(_feature_matrix(tiles)))


def evaluate_accuracy(model: ModelHandle, tiles: Sequence[Tile],
                      threshold: float = 0.5) -> float:
    """Fraction of tiles scored on the correct side of the threshold."""
    tiles = list(tiles)
    if not tiles:
        raise EmptyEvaluation("cannot evaluate over zero tiles")
    scores = score_many(model, tiles)
    predicted = scores >= threshold
    truth = _labels01(tiles).astype(bool)
    return float(np.mean(predicted == truth))
