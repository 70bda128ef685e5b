"""Two-stain color normalization in optical density space.

A tile's pixel cloud, viewed as optical densities, sits close to the plane
(through the origin) spanned by its two stain vectors. The basis is read off
that plane and extreme projection angles; normalization re-expresses per-pixel
stain concentrations in a shared reference basis with percentile-matched
ranges.

OD transform: od = -log10((rgb + 1) / 256), channelwise. The +1 keeps zero
intensities finite and makes rgb_from_od an exact inverse on the u8 grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpec, NoStainSignal

__all__ = [
    "REFERENCE_BASIS",
    "StainBasis",
    "estimate_stain_basis",
    "normalize_tile",
    "od_from_rgb",
    "rgb_from_od",
]

_OD_WHITE_CUTOFF = 0.15  # mean OD below this counts as unstained background
_MIN_STAINED_FRACTION = 0.01
_MIN_ANGLE_DEG = 10.0
_MAX_ANGLE_DEG = 170.0
# percentile-angle fallback half-width; used when a tile's OD cloud is too
# one-dimensional for the 1/99 spread to clear the minimum angle
_FALLBACK_HALF_ANGLE_DEG = 6.0


@dataclass(frozen=True)
class StainBasis:
    """Unit stain vectors in OD space plus robust per-stain maxima."""

    hematoxylin: tuple[float, float, float]
    eosin: tuple[float, float, float]
    max_concentrations: tuple[float, float]

    def __post_init__(self) -> None:
        for name, vec in (("hematoxylin", self.hematoxylin), ("eosin", self.eosin)):
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (3,):
                raise InvalidSpec("%s must have 3 components" % name)
            if np.any(arr < 0):
                raise InvalidSpec("%s has negative components" % name)
            if abs(float(np.linalg.norm(arr)) - 1.0) > 1e-6:
                raise InvalidSpec("%s is not unit length" % name)
        angle = self.angle_deg()
        if not (_MIN_ANGLE_DEG < angle < _MAX_ANGLE_DEG):
            raise InvalidSpec("stain angle %.2f deg outside (%g, %g)"
                              % (angle, _MIN_ANGLE_DEG, _MAX_ANGLE_DEG))
        if any(c < 0 for c in self.max_concentrations):
            raise InvalidSpec("max concentrations must be non-negative")

    def angle_deg(self) -> float:
        dot = float(np.clip(np.dot(self.hematoxylin, self.eosin), -1.0, 1.0))
        return math.degrees(math.acos(dot))

    def matrix(self) -> np.ndarray:
        """Stain matrix with vectors as columns, shape (3, 2)."""
        return np.stack(
            [np.asarray(self.hematoxylin), np.asarray(self.eosin)], axis=1
        )


def od_from_rgb(pixels: np.ndarray) -> np.ndarray:
    return -np.log10((pixels.astype(np.float64) + 1.0) / 256.0)


def rgb_from_od(od: np.ndarray) -> np.ndarray:
    rgb = 256.0 * np.power(10.0, -od) - 1.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _concentrations(od_flat: np.ndarray, basis: StainBasis) -> np.ndarray:
    """Least-squares per-pixel stain loads, clipped to physical >= 0."""
    m = basis.matrix()
    c, *_ = np.linalg.lstsq(m, od_flat.T, rcond=None)
    return np.maximum(c, 0.0)


def estimate_stain_basis(tile) -> StainBasis:
    """Fit the two stain vectors from one tile's stained pixels."""
    od = od_from_rgb(tile.pixels).reshape(-1, 3)
    stained = od[od.mean(axis=1) >= _OD_WHITE_CUTOFF]
    if len(stained) < _MIN_STAINED_FRACTION * len(od):
        raise NoStainSignal(
            "%.2f%% stained pixels on %s, need %.0f%%"
            % (100.0 * len(stained) / len(od), tile.slide_id,
               100.0 * _MIN_STAINED_FRACTION)
        )
    # principal plane through the origin: stains add, they do not offset
    _, _, vt = np.linalg.svd(stained, full_matrices=False)
    p1, p2 = vt[0], vt[1]
    if p1.sum() < 0:  # keep the dominant axis pointed into positive OD
        p1 = -p1
    a = stained @ p1
    b = stained @ p2
    phi = np.arctan2(b, a)
    lo, hi = np.percentile(phi, (1.0, 99.0))
    if math.degrees(hi - lo) < _MIN_ANGLE_DEG:
        mid = 0.5 * (lo + hi)
        half = math.radians(_FALLBACK_HALF_ANGLE_DEG)
        lo, hi = mid - half, mid + half
    v_lo = math.cos(lo) * p1 + math.sin(lo) * p2
    v_hi = math.cos(hi) * p1 + math.sin(hi) * p2
    vecs = []
    for v in (v_lo, v_hi):
        v = np.maximum(v, 0.0)
        n = float(np.linalg.norm(v))
        if n == 0.0:
            raise NoStainSignal("degenerate stain direction on %s" % tile.slide_id)
        vecs.append(v / n)
    # the blue-looking stain absorbs red light: larger OD red component
    vecs.sort(key=lambda v: -float(v[0]))
    hema, eos = vecs
    provisional = StainBasis(tuple(hema), tuple(eos), (1.0, 1.0))
    conc = _concentrations(stained, provisional)
    max_h, max_e = np.percentile(conc, 99.0, axis=1)
    return StainBasis(tuple(hema), tuple(eos), (float(max_h), float(max_e)))


def normalize_tile(tile, source: StainBasis, reference: StainBasis):
    """Re-express the tile's stain content in the reference appearance."""
    od = od_from_rgb(tile.pixels)
    flat = od.reshape(-1, 3)
    conc = _concentrations(flat, source)
    for k in range(2):
        src_max = source.max_concentrations[k]
        ref_max = reference.max_concentrations[k]
        if src_max > 1e-6 and ref_max > 1e-6:
            conc[k] *= ref_max / src_max
    out_od = (reference.matrix() @ conc).T.reshape(od.shape)
    pixels = rgb_from_od(out_od)
    return tile.retagged(pixels, tile.transform_tag)


def _reference_tile_pixels(side: int = 224) -> np.ndarray:
    """Deterministic synthetic H&E-looking target used to fix the reference.

    Classic stain directions mixed with smooth seeded concentration fields;
    this is generated data, never a photograph.
    """
    h = np.array([0.65, 0.70, 0.29])
    e = np.array([0.07, 0.99, 0.11])
    h /= np.linalg.norm(h)
    e /= np.linalg.norm(e)
    rng = np.random.Generator(np.random.Philox(key=20240814))
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / side
    c_h = 0.55 + 0.45 * np.sin(2 * np.pi * (1.7 * xx + 0.6 * yy))
    c_e = 0.45 + 0.35 * np.cos(2 * np.pi * (0.8 * xx - 1.3 * yy))
    c_h += 0.05 * rng.standard_normal((side, side))
    c_e += 0.05 * rng.standard_normal((side, side))
    c_h = np.clip(c_h, 0.0, None)
    c_e = np.clip(c_e, 0.0, None)
    od = c_h[..., None] * h + c_e[..., None] * e
    return rgb_from_od(od)


def reference_tile():
    """The reference target as a Tile, for calibration and tests."""
    from .tiling import Tile

    return Tile(pixels=_reference_tile_pixels(), slide_id="reference", x=0, y=0,
                label="MetNeg", pitch_um=0.51, transform_tag="none")


# fitted once by estimate_stain_basis(reference_tile()) and frozen; the
# self-consistency test re-derives it and checks the angles still agree
REFERENCE_BASIS = StainBasis(
    hematoxylin=(0.6295280479834344, 0.7229226499101277, 0.2847407224987071),
    eosin=(0.11180873658031773, 0.9859105610985395, 0.1244153203535495),
    max_concentrations=(1.0782072183572984, 0.8977706762857115),
)
