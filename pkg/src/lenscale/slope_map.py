"""Where on a slide the classifier is length-scale sensitive.

For every tile on a dense non-overlapping grid, the tile is pushed through
the ladder's trained models and the trend of its signed correctness against
length is summarized as one slope. Slopes are normalized per slide to
[-1, 1]; cells below an insensitivity cutoff read as "flat". A coarser view
concatenates k x k cells into regions. Overlays paint the result onto a
thumbnail: warm where sensitive and right at full information, cool where
sensitive and wrong, untouched where flat.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import GridTooSmall, InvalidSpec, LadderModelMismatch
from .predictor import ModelHandle, score_many
from .scale_transforms import LevelLadder, apply_level, apply_rfl
from .slide_io import LABEL_POS, Slide
from .tiling import TILE_PX, Tile, TissueMask, cut_tile

__all__ = [
    "SlopeCell",
    "SlopeMap",
    "slope_from_scores",
    "normalize_slopes",
    "tile_slope",
    "build_slope_map",
    "concat_regional_map",
    "render_overlay",
    "residual_detail",
    "write_slope_csv",
]

DEFAULT_EPSILON = 0.1
_WARM = np.array([255, 140, 0], dtype=np.float64)
_COOL = np.array([40, 90, 235], dtype=np.float64)
_MIN_CELL_COVERAGE = 0.9  # same in-mask rule as the tile sampler


@dataclass(frozen=True)
class SlopeCell:
    row: int
    col: int
    x: int
    y: int
    raw_slope: float
    normalized_slope: float
    correct_at_identity: bool
    sensitive: bool


@dataclass(frozen=True)
class SlopeMap:
    slide_id: str
    axis: str
    epsilon: float
    cell_px: int
    n_rows: int
    n_cols: int
    cells: tuple[SlopeCell, ...]

    def cell_at(self, row: int, col: int) -> SlopeCell | None:
        for cell in self.cells:
            if cell.row == row and cell.col == col:
                return cell
        return None

    def max_abs_normalized(self) -> float:
        return max((abs(c.normalized_slope) for c in self.cells), default=0.0)


def slope_from_scores(lengths_um, ys) -> float:
    """Least-squares slope of signed correctness against length."""
    x = np.asarray(lengths_um, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise InvalidSpec("slope needs matching x and y with at least 2 points")
    dx = x - x.mean()
    denom = float(dx @ dx)
    if denom == 0.0:
        raise InvalidSpec("all lengths coincide; slope undefined")
    return float(dx @ (y - y.mean()) / denom)


def normalize_slopes(raw_slopes) -> list[float]:
    """Scale to [-1, 1] by the largest magnitude; all-zero input stays zero."""
    raws = [float(r) for r in raw_slopes]
    peak = max((abs(r) for r in raws), default=0.0)
    if peak == 0.0:
        return [0.0 for _ in raws]
    return [r / peak for r in raws]


def _signed_correctness(scores: np.ndarray, label: str) -> np.ndarray:
    return scores if label == LABEL_POS else 1.0 - scores


def _check_models(ladder: LevelLadder, models) -> None:
    if len(models) != len(ladder.levels):
        raise LadderModelMismatch(
            "%d models for %d levels" % (len(models), len(ladder.levels)))
    for model, level in zip(models, ladder.levels):
        if model.level_tag != level.tag:
            raise LadderModelMismatch(
                "model %s was trained at %r, ladder level is %r"
                % (model.model_id, model.level_tag, level.tag))
    if len(ladder.levels) < 2:
        raise LadderModelMismatch("slope needs at least 2 ladder levels")


def tile_slope(tile: Tile, models, ladder: LevelLadder, label: str) -> float:
    """Slope of one tile's signed correctness across the sub-ladder."""
    _check_models(ladder, models)
    ys = []
    for model, level in zip(models, ladder.levels):
        transformed = apply_level(tile, level)
        s = score_many(model, [transformed])[0]
        ys.append(float(_signed_correctness(np.array([s]), label)[0]))
    return slope_from_scores(ladder.lengths_um(), ys)


def _grid_tiles(slide: Slide, mask: TissueMask):
    """Populated grid positions: windows at least 90% inside the mask."""
    h, w = mask.mask.shape
    out = []
    for row, y in enumerate(range(0, h - TILE_PX + 1, TILE_PX)):
        for col, x in enumerate(range(0, w - TILE_PX + 1, TILE_PX)):
            window = mask.mask[y:y + TILE_PX, x:x + TILE_PX]
            if window.sum() >= _MIN_CELL_COVERAGE * TILE_PX * TILE_PX:
                out.append((row, col, x, y))
    n_rows = max(0, (h - TILE_PX) // TILE_PX + 1)
    n_cols = max(0, (w - TILE_PX) // TILE_PX + 1)
    return out, n_rows, n_cols


def build_slope_map(slide: Slide, mask: TissueMask, models,
                    ladder: LevelLadder, identity_model: ModelHandle,
                    epsilon: float = DEFAULT_EPSILON,
                    threshold: float = 0.5, jobs: int = 1) -> SlopeMap:
    """Dense per-tile slope map of one slide.

    ``models`` follow the sub-ladder order; ``identity_model`` judges
    correctness on the untransformed tile (for an MFL sub-ladder the
    identity level is not part of the ladder, hence the separate handle).
    ``jobs`` caps concurrent per-level scoring passes; the result is
    identical for any cap.
    """
    _check_models(ladder, models)
    if not 0.0 < epsilon <= 1.0:
        raise InvalidSpec("epsilon must lie in (0, 1]")
    if jobs < 1:
        raise InvalidSpec("jobs must be positive")
    positions, n_rows, n_cols = _grid_tiles(slide, mask)
    if n_rows == 0 or n_cols == 0:
        raise GridTooSmall("slide smaller than one grid cell")

    tiles = [cut_tile(slide, x, y) for _, _, x, y in positions]
    lengths = ladder.lengths_um()
    ys = np.zeros((len(tiles), len(lengths)))

    def level_pass(j):
        model, level = models[j], ladder.levels[j]
        transformed = [apply_level(t, level) for t in tiles]
        return _signed_correctness(score_many(model, transformed), slide.label)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for j, col in enumerate(pool.map(level_pass, range(len(models)))):
                ys[:, j] = col
    else:
        for j in range(len(models)):
            ys[:, j] = level_pass(j)
    identity_scores = score_many(identity_model, tiles)

    x = np.asarray(lengths)
    dx = x - x.mean()
    raw = (ys - ys.mean(axis=1, keepdims=True)) @ dx / float(dx @ dx)
    norm = normalize_slopes(raw)

    cells = []
    for (row, col, cx, cy), r, nrm, s_id in zip(positions, raw, norm,
                                                identity_scores):
        correct = (float(s_id) >= threshold) == (slide.label == LABEL_POS)
        cells.append(SlopeCell(row=row, col=col, x=cx, y=cy,
                               raw_slope=float(r), normalized_slope=nrm,
                               correct_at_identity=correct,
                               sensitive=abs(nrm) >= epsilon))
    return SlopeMap(slide_id=slide.slide_id, axis=ladder.axis,
                    epsilon=epsilon, cell_px=TILE_PX, n_rows=n_rows,
                    n_cols=n_cols, cells=tuple(cells))


def concat_regional_map(slope_map: SlopeMap, k: int = 5) -> SlopeMap:
    """Concatenate k x k adjacent cells into regions and renormalize.

    A region's raw slope is the exact mean of its populated members;
    correctness is their majority (ties count as correct). Rows and columns
    past the last full block are dropped.
    """
    if k < 1:
        raise InvalidSpec("k must be positive")
    if slope_map.n_rows < k or slope_map.n_cols < k:
        raise GridTooSmall(
            "grid %dx%d cannot hold a %dx%d region"
            % (slope_map.n_rows, slope_map.n_cols, k, k))
    groups: dict[tuple[int, int], list[SlopeCell]] = {}
    for cell in slope_map.cells:
        rr, cc = cell.row // k, cell.col // k
        if rr < slope_map.n_rows // k and cc < slope_map.n_cols // k:
            groups.setdefault((rr, cc), []).append(cell)

    keys = sorted(groups)
    raws = [sum(c.raw_slope for c in groups[key]) / len(groups[key])
            for key in keys]
    norms = normalize_slopes(raws)
    cells = []
    for key, raw, nrm in zip(keys, raws, norms):
        members = groups[key]
        n_correct = sum(c.correct_at_identity for c in members)
        cells.append(SlopeCell(
            row=key[0], col=key[1],
            x=min(c.x for c in members), y=min(c.y for c in members),
            raw_slope=raw, normalized_slope=nrm,
            correct_at_identity=2 * n_correct >= len(members),
            sensitive=abs(nrm) >= slope_map.epsilon))
    return SlopeMap(slide_id=slope_map.slide_id, axis=slope_map.axis,
                    epsilon=slope_map.epsilon,
                    cell_px=slope_map.cell_px * k,
                    n_rows=slope_map.n_rows // k,
                    n_cols=slope_map.n_cols // k, cells=tuple(cells))


def render_overlay(slide: Slide, slope_map: SlopeMap,
                   thumb_px_per_cell: int = 8) -> Image.Image:
    """Thumbnail with the sensitivity trichotomy painted over it.

    Warm cells: sensitive and correct at full information; cool: sensitive
    and wrong; flat cells show the bare thumbnail. Opacity follows
    |normalized slope|.
    """
    cell = slope_map.cell_px
    rows, cols = slope_map.n_rows, slope_map.n_cols
    covered = slide.pixels[:rows * cell, :cols * cell].astype(np.float64)
    # exact block mean down to thumb_px_per_cell pixels per cell
    block = cell // thumb_px_per_cell
    if block * thumb_px_per_cell != cell:
        raise InvalidSpec("cell size %d is not divisible into %d thumb pixels"
                          % (cell, thumb_px_per_cell))
    thumb = covered.reshape(rows * thumb_px_per_cell, block,
                            cols * thumb_px_per_cell, block, 3).mean(axis=(1, 3))

    for c in slope_map.cells:
        if not c.sensitive:
            continue
        tone = _WARM if c.correct_at_identity else _COOL
        alpha = abs(c.normalized_slope)
        r0 = c.row * thumb_px_per_cell
        c0 = c.col * thumb_px_per_cell
        patch = thumb[r0:r0 + thumb_px_per_cell, c0:c0 + thumb_px_per_cell]
        patch[:] = (1.0 - alpha) * patch + alpha * tone
    out = np.clip(np.rint(thumb), 0, 255).astype(np.uint8)
    return Image.fromarray(out)


def residual_detail(tile: Tile, f_char: float):
    """(original, degraded, difference) images for one tile.

    The difference is the signed residual offset to mid-gray, so a tile the
    degradation leaves untouched reads as uniform 128.
    """
    if f_char < 1:
        raise InvalidSpec("degradation factor must be at least 1")
    original = tile.pixels
    degraded = apply_rfl(tile, f_char).pixels
    diff = original.astype(np.int16) - degraded.astype(np.int16) + 128
    return original, degraded, np.clip(diff, 0, 255).astype(np.uint8)


def write_slope_csv(slope_map: SlopeMap, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "axis", "x", "y", "raw_slope",
                         "norm_slope", "correct", "sensitive"])
        for c in slope_map.cells:
            writer.writerow([slope_map.slide_id, slope_map.axis, c.x, c.y,
                             repr(c.raw_slope), repr(c.normalized_slope),
                             int(c.correct_at_identity), int(c.sensitive)])
