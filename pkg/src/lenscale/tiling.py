"""Tissue masking and tile sampling.

The mask comes from Otsu's threshold on an 8-bit luma histogram restricted to
the annotated region, keeping the darker side (stained tissue on bright
glass). Tiles are fixed 224 x 224 px windows sampled at uniformly random,
pairwise non-overlapping positions with at least 90% of their pixels inside
the mask.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateHistogram, InsufficientTissue
from .seeds import stream
from .slide_io import Slide

__all__ = [
    "TILE_PX",
    "Tile",
    "TissueMask",
    "build_tissue_mask",
    "cut_tile",
    "luma_u8",
    "otsu_threshold",
    "sample_tiles",
    "write_tile_csv",
]

TILE_PX = 224
_TILE_AREA = TILE_PX * TILE_PX
_MIN_IN_MASK = -(-9 * _TILE_AREA // 10)  # ceil(0.9 * area), exact in ints
_ATTEMPT_FACTOR = 50


@dataclass(frozen=True)
class Tile:
    """One 224 px square window cut from a slide.

    ``transform_tag`` records the ablation applied to ``pixels``: "none" for
    raw tiles, else "rfl(<factor>)" or "mfl(<crop_px>)".
    """

    pixels: np.ndarray  # (224, 224, 3) uint8
    slide_id: str
    x: int
    y: int
    label: str
    pitch_um: float
    transform_tag: str = "none"

    def retagged(self, pixels: np.ndarray, tag: str) -> "Tile":
        return replace(self, pixels=pixels, transform_tag=tag)


@dataclass(frozen=True)
class TissueMask:
    """Binary tissue map for one slide plus the threshold that produced it."""

    mask: np.ndarray  # (H, W) bool
    threshold: int

    def coverage(self) -> float:
        return float(self.mask.mean())


def luma_u8(pixels: np.ndarray) -> np.ndarray:
    """Integer luma (299 R + 587 G + 114 B) / 1000, same result on any host."""
    p = pixels.astype(np.int64)
    return ((299 * p[..., 0] + 587 * p[..., 1] + 114 * p[..., 2]) // 1000).astype(np.uint8)


def otsu_threshold(hist: np.ndarray) -> int:
    """Exhaustive Otsu threshold over a 256-bin histogram.

    Returns the smallest t maximizing the between-class variance of the split
    [0..t] vs [t+1..255]. All comparisons are exact integer arithmetic: with
    class weights w0, w1 and first moments m0, m1, the between-class variance
    is proportional to (m0*w1 - m1*w0)^2 / (w0*w1), and two candidates are
    compared by cross-multiplying the fractions.
    """
    h = np.asarray(hist)
    if h.shape != (256,) or np.any(h < 0):
        raise ValueError("hist must be 256 non-negative counts")
    counts = [int(v) for v in h]
    if sum(1 for v in counts if v > 0) <= 1:
        raise DegenerateHistogram("histogram has at most one populated bin")
    total = sum(counts)
    total_m = sum(i * v for i, v in enumerate(counts))
    best_t = -1
    best_num = -1  # (m0*w1 - m1*w0)^2
    best_den = 1  # w0*w1
    w0 = 0
    m0 = 0
    for t in range(256):
        w0 += counts[t]
        m0 += t * counts[t]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        m1 = total_m - m0
        num = (m0 * w1 - m1 * w0) ** 2
        den = w0 * w1
        if num * best_den > best_num * den:
            best_num, best_den, best_t = num, den, t
    return best_t


def build_tissue_mask(slide: Slide) -> TissueMask:
    """Threshold the annotated region into tissue (dark) vs glass (bright)."""
    luma = luma_u8(slide.pixels)
    inside = slide.annotation
    hist = np.bincount(luma[inside].ravel(), minlength=256)
    t = otsu_threshold(hist)
    mask = inside & (luma <= t)
    return TissueMask(mask=mask, threshold=t)


def cut_tile(slide: Slide, x: int, y: int, transform_tag: str = "none") -> Tile:
    """Copy the window with top-left corner (x, y) out of the slide."""
    h, w = slide.pixels.shape[:2]
    if not (0 <= x <= w - TILE_PX and 0 <= y <= h - TILE_PX):
        raise ValueError("tile origin (%d, %d) outside slide %dx%d" % (x, y, w, h))
    pixels = np.ascontiguousarray(slide.pixels[y : y + TILE_PX, x : x + TILE_PX])
    return Tile(
        pixels=pixels,
        slide_id=slide.slide_id,
        x=x,
        y=y,
        label=slide.label,
        pitch_um=slide.pitch_um,
        transform_tag=transform_tag,
    )


def _mask_integral(mask: np.ndarray) -> np.ndarray:
    # int32 is enough below 2**31 pixels and halves the footprint on big slides
    dtype = np.int32 if mask.size < 2**31 else np.int64
    s = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=dtype)
    np.cumsum(np.cumsum(mask, axis=0, dtype=dtype), axis=1, out=s[1:, 1:])
    return s


def _in_mask_count(integral: np.ndarray, x: int, y: int) -> int:
    return int(
        integral[y + TILE_PX, x + TILE_PX]
        - integral[y, x + TILE_PX]
        - integral[y + TILE_PX, x]
        + integral[y, x]
    )


def sample_tiles(slide: Slide, mask: TissueMask, n: int, seed: int) -> list[Tile]:
    """Sample n non-overlapping in-mask tiles at random positions.

    Rejection sampling: positions uniform over the slide, accepted when at
    least 90% of the window is inside the mask and it overlaps no previously
    accepted tile. An occupancy grid of tile-sized cells limits each overlap
    check to at most four cells' occupants. Gives up with InsufficientTissue
    after 50 * n attempts.
    """
    if n < 1:
        raise ValueError("n must be positive")
    h, w = mask.mask.shape
    if h < TILE_PX or w < TILE_PX:
        raise InsufficientTissue("slide smaller than one tile")
    rng = stream(seed, "tiles", slide.slide_id)
    integral = _mask_integral(mask.mask)
    occupied: dict[tuple[int, int], list[tuple[int, int]]] = {}
    accepted: list[tuple[int, int]] = []
    budget = _ATTEMPT_FACTOR * n
    chunk = 1024
    while budget > 0 and len(accepted) < n:
        take = min(chunk, budget)
        xs = rng.integers(0, w - TILE_PX + 1, take)
        ys = rng.integers(0, h - TILE_PX + 1, take)
        budget -= take
        for x, y in zip(xs.tolist(), ys.tolist()):
            if _in_mask_count(integral, x, y) < _MIN_IN_MASK:
                continue
            cells = [
                (cx, cy)
                for cx in range(x // TILE_PX, (x + TILE_PX - 1) // TILE_PX + 1)
                for cy in range(y // TILE_PX, (y + TILE_PX - 1) // TILE_PX + 1)
            ]
            clash = False
            for cell in cells:
                for ox, oy in occupied.get(cell, ()):
                    if abs(ox - x) < TILE_PX and abs(oy - y) < TILE_PX:
                        clash = True
                        break
                if clash:
                    break
            if clash:
                continue
            accepted.append((x, y))
            for cell in cells:
                occupied.setdefault(cell, []).append((x, y))
            if len(accepted) == n:
                break
    if len(accepted) < n:
        raise InsufficientTissue(
            "placed %d of %d tiles on %s within %d attempts"
            % (len(accepted), n, slide.slide_id, _ATTEMPT_FACTOR * n)
        )
    return [cut_tile(slide, x, y) for x, y in accepted]


def write_tile_csv(tiles: list[Tile], path: str | Path) -> None:
    """Dump tile coordinates (not pixels) for bookkeeping."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "x", "y", "label", "pitch_um", "transform_tag"])
        for t in tiles:
            writer.writerow([t.slide_id, t.x, t.y, t.label, repr(t.pitch_um), t.transform_tag])
