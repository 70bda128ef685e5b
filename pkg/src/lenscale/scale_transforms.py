"""Information-ablation operators and their level ladders.

Two operators degrade a 224 px tile along one physical axis each, always
returning a 224 px tile so any fixed-input scorer sees the same geometry:

* resolution ablation: area-average downsample by ``factor`` to a side of
  ``max(2, round(224 / factor))`` pixels, then bilinear upsample back. The
  surviving detail has minimum length ``2 * pitch_um * factor`` (the Nyquist
  wavelength of the intermediate raster).
* field-of-view ablation: center crop to ``crop_px`` and bilinear upsample
  back. The largest visible structure is ``crop_px * pitch_um`` across.

Factor 1 and crop 224 are exact identities, bit for bit.

Ladders are geometric: factors span [1, 30], crops span [5, 224] px.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidCrop, InvalidFactor
from .tiling import TILE_PX, Tile

__all__ = [
    "AXES",
    "MAX_RFL_FACTOR",
    "MIN_MFL_CROP",
    "Level",
    "LevelLadder",
    "apply_level",
    "apply_mfl",
    "apply_rfl",
    "make_ladder",
    "write_ladder_csv",
]

AXES = ("rfl", "mfl")
MAX_RFL_FACTOR = 30.0
MIN_MFL_CROP = 5
DEFAULT_LEVELS = {"rfl": 18, "mfl": 12}


@dataclass(frozen=True)
class Level:
    """One rung of a ladder: the operator control value and its length."""

    axis: str
    index: int
    control: float  # downsample factor, or crop size in px
    length_um: float

    @property
    def is_identity(self) -> bool:
        if self.axis == "rfl":
            return self.control == 1.0
        return int(self.control) == TILE_PX

    @property
    def tag(self) -> str:
        if self.axis == "rfl":
            return "rfl(%g)" % self.control
        return "mfl(%d)" % int(self.control)


@dataclass(frozen=True)
class LevelLadder:
    """Ordered levels of one axis, finest information first."""

    axis: str
    pitch_um: float
    levels: tuple[Level, ...]

    def lengths_um(self) -> list[float]:
        return [lv.length_um for lv in self.levels]

    def identity_index(self) -> int:
        for i, lv in enumerate(self.levels):
            if lv.is_identity:
                return i
        raise ValueError("ladder has no identity level")

    def truncated(self, max_length_um: float) -> "LevelLadder":
        """Sub-ladder of levels not longer than the cutoff (at least one)."""
        kept = tuple(lv for lv in self.levels if lv.length_um <= max_length_um)
        if not kept:
            kept = (self.levels[0],)
        return LevelLadder(self.axis, self.pitch_um, kept)


def make_ladder(axis: str, pitch_um: float, n_levels: int | None = None) -> LevelLadder:
    """Geometric ladder for one axis.

    >>> [round(l.control, 3) for l in make_ladder("rfl", 0.51, 2).levels]
    [1.0, 30.0]
    >>> [int(l.control) for l in make_ladder("mfl", 0.51, 3).levels]
    [5, 33, 224]
    """
    if axis not in AXES:
        raise ValueError("axis must be one of %r" % (AXES,))
    if pitch_um <= 0:
        raise ValueError("pitch_um must be positive")
    n = DEFAULT_LEVELS[axis] if n_levels is None else int(n_levels)
    if n < 2:
        raise ValueError("need at least 2 levels")
    levels: list[Level] = []
    if axis == "rfl":
        for i in range(n):
            f = math.pow(MAX_RFL_FACTOR, i / (n - 1))
            levels.append(Level("rfl", i, f, 2.0 * pitch_um * f))
    else:
        ratio = TILE_PX / MIN_MFL_CROP
        crops = []
        for i in range(n):
            c = int(math.floor(MIN_MFL_CROP * math.pow(ratio, i / (n - 1)) + 0.5))
            crops.append(c)
        if any(b <= a for a, b in zip(crops, crops[1:])):
            raise ValueError("n_levels=%d collapses adjacent crop sizes" % n)
        for i, c in enumerate(crops):
            levels.append(Level("mfl", i, float(c), c * pitch_um))
    return LevelLadder(axis=axis, pitch_um=pitch_um, levels=tuple(levels))


# ---------------------------------------------------------------------------
# resampling kernels


def _area_weights(dst: int, src: int) -> np.ndarray:
    """Rows integrate disjoint [i*src/dst, (i+1)*src/dst) source spans."""
    w = np.zeros((dst, src), dtype=np.float64)
    r = src / dst
    for i in range(dst):
        a = i * r
        b = (i + 1) * r
        j0 = int(math.floor(a))
        j1 = min(int(math.ceil(b)), src)
        for j in range(j0, j1):
            w[i, j] = min(b, j + 1.0) - max(a, float(j))
    w /= w.sum(axis=1, keepdims=True)
    return w


def _linear_weights(dst: int, src: int) -> np.ndarray:
    """Bilinear interpolation rows, half-pixel-center convention."""
    w = np.zeros((dst, src), dtype=np.float64)
    for i in range(dst):
        x = (i + 0.5) * src / dst - 0.5
        if x <= 0.0:
            w[i, 0] = 1.0
        elif x >= src - 1:
            w[i, src - 1] = 1.0
        else:
            j = int(math.floor(x))
            t = x - j
            w[i, j] = 1.0 - t
            w[i, j + 1] = t
    return w


def _resample(pixels: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    out = np.tensordot(rows, pixels.astype(np.float64), axes=(1, 0))
    out = np.tensordot(cols, out, axes=(1, 1)).transpose(1, 0, 2)
    return out


def _to_u8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8)


def apply_rfl(tile: Tile, factor: float) -> Tile:
    """Destroy detail finer than ``2 * pitch * factor`` micrometers."""
    f = float(factor)
    if not math.isfinite(f) or f < 1.0 or f > MAX_RFL_FACTOR:
        raise InvalidFactor("factor %r outside [1, %g]" % (factor, MAX_RFL_FACTOR))
    tag = "rfl(%g)" % f
    if f == 1.0:
        return tile.retagged(tile.pixels, tag)
    side = max(2, int(math.floor(TILE_PX / f + 0.5)))
    down = _area_weights(side, TILE_PX)
    up = _linear_weights(TILE_PX, side)
    small = _resample(tile.pixels, down, down)
    return tile.retagged(_to_u8(_resample(small, up, up)), tag)


def apply_mfl(tile: Tile, crop_px: int) -> Tile:
    """Restrict the field of view to a centered ``crop_px`` square."""
    c = int(crop_px)
    if c != crop_px or c < 1 or c > TILE_PX:
        raise InvalidCrop("crop_px %r outside [1, %d]" % (crop_px, TILE_PX))
    tag = "mfl(%d)" % c
    if c == TILE_PX:
        return tile.retagged(tile.pixels, tag)
    start = (TILE_PX - c) // 2
    window = tile.pixels[start : start + c, start : start + c]
    up = _linear_weights(TILE_PX, c)
    return tile.retagged(_to_u8(_resample(window, up, up)), tag)


def apply_level(tile: Tile, level: Level) -> Tile:
    if level.axis == "rfl":
        return apply_rfl(tile, level.control)
    return apply_mfl(tile, int(level.control))


def write_ladder_csv(ladder: LevelLadder, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "index", "control", "length_um"])
        for lv in ladder.levels:
            writer.writerow([lv.axis, lv.index, repr(lv.control), repr(lv.length_um)])
