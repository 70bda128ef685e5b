"""Slide records, dataset manifests, and the synthetic phantom generator.

A dataset is a flat tab-separated manifest, one case per line::

    case_id <TAB> slide.png <TAB> annotation.png|- <TAB> MetPos|MetNeg <TAB> pitch_um

Slides are 8-bit RGB PNGs, annotations 8-bit grayscale PNGs (0 = outside,
255 = inside). Paths are resolved relative to the manifest's directory.

The phantom generator renders deterministic slide images whose two class
signals live at controlled length scales:

* a fine sinusoidal plaid of spatial period ``micro_period_um``, present only
  in positive slides and only inside "on" cells of a jittered Voronoi
  partition, with per-cell amplitude jitter;
* a cell-tone arrangement of correlation length ``macro_scale_um``: each
  Voronoi cell of a positive slide is brightened or darkened by a zero-mean
  per-cell offset, so only windows spanning cell boundaries can detect it;
* an optional class-wise color shift.

Both classes share the same tissue geometry statistics and the same
multi-octave noise bed, so once a discriminative signal is destroyed by a
resolution or field-of-view transform nothing else separates the classes.
Every slide is rendered from its own counter-based random stream keyed by
(seed, case id), so generation order never matters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

from .errors import (
    InvalidSpec,
    MalformedManifest,
    MissingFile,
    UnknownLabel,
)
from .seeds import stream

__all__ = [
    "LABEL_NEG",
    "LABEL_POS",
    "LABELS",
    "DEFAULT_PITCH_UM",
    "CaseRecord",
    "DatasetManifest",
    "PhantomCase",
    "PhantomSpec",
    "Slide",
    "generate_phantom",
    "load_manifest",
    "load_slide",
    "load_truth",
    "render_case",
    "save_manifest",
]

LABEL_POS = "MetPos"
LABEL_NEG = "MetNeg"
LABELS = (LABEL_POS, LABEL_NEG)

DEFAULT_PITCH_UM = 0.51

# Rendering constants. Tissue sits well below glass so a histogram threshold
# separates them; amplitudes leave headroom so the sum never clips except in
# far tails.
_GLASS_LEVEL = 0.96
_GLASS_NOISE = 0.006
_TISSUE_LEVEL = 0.64
_TISSUE_TINT = (0.05, -0.04, 0.0)  # pinkish cast, applied per channel
# box-blur width -> sigma; the coarse bands carry extra energy so that a
# window much smaller than a macro cell cannot read the cell gradient
_BED_SIGMAS = {2: 0.018, 4: 0.018, 8: 0.018, 16: 0.028, 32: 0.028, 64: 0.028}
_CELL_JITTER = 0.35  # seed jitter as a fraction of cell size
_AMP_JITTER = (0.5, 1.25)  # per-cell texture amplitude range
_TISSUE_FIELD_CELLS = 7  # coarse grid nodes per axis for the tissue blobs


@dataclass(frozen=True)
class CaseRecord:
    """One manifest line: where a slide lives and what it is."""

    case_id: str
    slide_path: Path
    mask_path: Path | None
    label: str
    pitch_um: float


@dataclass(frozen=True)
class DatasetManifest:
    """An ordered, validated collection of cases."""

    cases: tuple[CaseRecord, ...]
    root: Path

    def counts(self) -> tuple[int, int]:
        """(positive, negative) case counts."""
        pos = sum(1 for c in self.cases if c.label == LABEL_POS)
        return pos, len(self.cases) - pos

    def by_id(self, case_id: str) -> CaseRecord:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)


@dataclass
class Slide:
    """A fully loaded slide: pixels plus its annotation region."""

    slide_id: str
    pixels: np.ndarray  # (H, W, 3) uint8
    annotation: np.ndarray  # (H, W) bool
    pitch_um: float
    label: str


class PhantomCase(NamedTuple):
    """In-memory render of one phantom slide with its ground truth."""

    pixels: np.ndarray  # (H, W, 3) uint8
    tissue: np.ndarray  # (H, W) bool, true tissue region
    texture: np.ndarray  # (H, W) bool, true fine-texture region


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a generated phantom dataset.

    ``micro_amplitude`` and ``macro_amplitude`` scale the two discriminative
    signals (fractions of dynamic range); zero removes that signal entirely,
    which is how single-channel datasets are made for calibration runs.
    """

    n_cases_pos: int
    n_cases_neg: int
    micro_period_um: float
    macro_scale_um: float
    color_shift: float
    tissue_fraction: float
    seed: int
    pitch_um: float = DEFAULT_PITCH_UM
    micro_amplitude: float = 0.10
    macro_amplitude: float = 0.08
    slide_px: int = 4480

    def __post_init__(self) -> None:
        if self.n_cases_pos < 1 or self.n_cases_neg < 1:
            raise InvalidSpec("need at least one case per class")
        if self.pitch_um <= 0:
            raise InvalidSpec("pitch_um must be positive")
        if self.micro_period_um < 2.0 * self.pitch_um:
            raise InvalidSpec(
                "micro_period_um %.3f below the 2*pitch sampling limit %.3f"
                % (self.micro_period_um, 2.0 * self.pitch_um)
            )
        extent_um = self.slide_px * self.pitch_um
        if not (0.0 < self.macro_scale_um <= extent_um):
            raise InvalidSpec("macro_scale_um outside (0, slide extent]")
        if not (0.0 <= self.color_shift <= 0.05):
            raise InvalidSpec("color_shift outside [0, 0.05]")
        if not (0.0 < self.tissue_fraction <= 1.0):
            raise InvalidSpec("tissue_fraction outside (0, 1]")
        if not (0.0 <= self.micro_amplitude <= 0.2):
            raise InvalidSpec("micro_amplitude outside [0, 0.2]")
        if not (0.0 <= self.macro_amplitude <= 0.2):
            raise InvalidSpec("macro_amplitude outside [0, 0.2]")
        if self.slide_px < 224:
            raise InvalidSpec("slide_px smaller than one tile")


# ---------------------------------------------------------------------------
# manifest I/O


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a manifest file.

    Raises MalformedManifest (naming the line number) on structural problems,
    UnknownLabel for a bad label column, MissingFile if a referenced file
    does not exist.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    root = path.parent
    cases: list[CaseRecord] = []
    seen: set[str] = set()
    text = path.read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise MalformedManifest(
                "line %d: expected 5 tab-separated fields, got %d" % (lineno, len(fields))
            )
        case_id, slide_rel, mask_rel, label, pitch_text = fields
        if not case_id:
            raise MalformedManifest("line %d: empty case id" % lineno)
        if case_id in seen:
            raise MalformedManifest("line %d: duplicate case id %r" % (lineno, case_id))
        seen.add(case_id)
        if label not in LABELS:
            raise UnknownLabel("line %d: label %r" % (lineno, label))
        try:
            pitch = float(pitch_text)
        except ValueError:
            raise MalformedManifest("line %d: bad pitch %r" % (lineno, pitch_text)) from None
        if not math.isfinite(pitch) or pitch <= 0:
            raise MalformedManifest("line %d: pitch must be positive" % lineno)
        slide_path = root / slide_rel
        if not slide_path.is_file():
            raise MissingFile("line %d: %s" % (lineno, slide_path))
        mask_path: Path | None = None
        if mask_rel != "-":
            mask_path = root / mask_rel
            if not mask_path.is_file():
                raise MissingFile("line %d: %s" % (lineno, mask_path))
        cases.append(CaseRecord(case_id, slide_path, mask_path, label, pitch))
    if not cases:
        raise MalformedManifest("manifest has no cases")
    return DatasetManifest(cases=tuple(cases), root=root)


def save_manifest(cases: list[CaseRecord], path: str | Path) -> None:
    """Write cases to a manifest file, paths relative to its directory."""
    path = Path(path)
    root = path.parent
    lines = []
    for c in cases:
        mask = "-" if c.mask_path is None else str(Path(c.mask_path).relative_to(root))
        lines.append(
            "\t".join(
                [
                    c.case_id,
                    str(Path(c.slide_path).relative_to(root)),
                    mask,
                    c.label,
                    repr(float(c.pitch_um)),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_slide(record: CaseRecord) -> Slide:
    """Load a case's pixel data. The annotation defaults to the full frame."""
    pixels = _read_rgb(record.slide_path)
    h, w = pixels.shape[:2]
    if h < 224 or w < 224:
        raise MalformedManifest(
            "slide %s is %dx%d, smaller than one 224 px tile" % (record.case_id, w, h)
        )
    if record.mask_path is None:
        annotation = np.ones((h, w), dtype=bool)
    else:
        annotation = _read_mask(record.mask_path)
        if annotation.shape != (h, w):
            raise MalformedManifest(
                "annotation for %s is %s, slide is %s"
                % (record.case_id, annotation.shape, (h, w))
            )
    return Slide(
        slide_id=record.case_id,
        pixels=pixels,
        annotation=annotation,
        pitch_um=record.pitch_um,
        label=record.label,
    )


def _read_rgb(path: Path) -> np.ndarray:
    if not Path(path).is_file():
        raise MissingFile(str(path))
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _read_mask(path: Path) -> np.ndarray:
    if not Path(path).is_file():
        raise MissingFile(str(path))
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def _write_png(path: Path, array: np.ndarray) -> None:
    # compress_level 1: slides are noise-like and barely compress anyway
    Image.fromarray(array).save(path, format="PNG", compress_level=1)


# ---------------------------------------------------------------------------
# phantom rendering


def _box_blur(field: np.ndarray, width: int) -> np.ndarray:
    """Mean filter with a width x width box, reflect-padded, same shape."""
    if width <= 1:
        return field
    pad = width // 2
    padded = np.pad(field, pad, mode="reflect")
    s = np.cumsum(np.cumsum(padded, axis=0, dtype=np.float64), axis=1)
    s = np.pad(s, ((1, 0), (1, 0)))
    h, w = field.shape
    out = (
        s[width : width + h, width : width + w]
        - s[width : width + h, 0:w]
        - s[0:h, width : width + w]
        + s[0:h, 0:w]
    )
    return (out / float(width * width)).astype(np.float32)


def _smooth_field(size: int, nodes: int, rng: np.random.Generator) -> np.ndarray:
    """Bilinear interpolation of a coarse Gaussian grid up to size x size."""
    coarse = rng.standard_normal((nodes, nodes))
    # node i sits at t = i/(nodes-1) in [0, 1]
    pos = np.linspace(0.0, nodes - 1.0, size)
    j = np.minimum(pos.astype(np.int64), nodes - 2)
    t = (pos - j).astype(np.float32)
    w = np.zeros((size, nodes), dtype=np.float32)
    w[np.arange(size), j] = 1.0 - t
    w[np.arange(size), j + 1] = t
    return (w @ coarse.astype(np.float32) @ w.T).astype(np.float32)


def _noise_bed(size: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean noise with equal energy in each octave band.

    The flat-per-octave spectrum matters: it guarantees that whatever narrow
    band a degraded texture residue lands in, comparable class-common energy
    is already there.
    """
    bed = np.zeros((size, size), dtype=np.float32)
    for width, sigma in _BED_SIGMAS.items():
        layer = _box_blur(rng.standard_normal((size, size)).astype(np.float32), width)
        sd = float(layer.std())
        if sd > 0:
            bed += layer * (sigma / sd)
    return bed


def _cell_maps(
    size: int, cell_px: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel attribute maps of a jittered-lattice Voronoi partition.

    Returns (texture_on, amplitude, tone_sign) maps. One seed per lattice
    cell, jittered; each pixel belongs to the nearest of its 3x3 neighbor
    seeds, which is exact for jitter < 0.5 cell. Tones alternate with
    lattice parity, so any window spanning two adjacent cells is guaranteed
    a contrast edge; with independent random tones a window needs to span
    several cells before a same-sign run becomes unlikely, which smears the
    arrangement signal well past the nominal cell scale.
    """
    n = int(math.ceil(size / cell_px)) + 2  # one margin cell on each side
    jx = rng.uniform(-_CELL_JITTER, _CELL_JITTER, (n, n)).astype(np.float32)
    jy = rng.uniform(-_CELL_JITTER, _CELL_JITTER, (n, n)).astype(np.float32)
    ci = np.arange(n, dtype=np.float32) - 1.0
    seed_x = (ci[None, :] + 0.5 + jx) * cell_px
    seed_y = (ci[:, None] + 0.5 + jy) * cell_px
    on_cell = rng.random((n, n)) < 0.5
    amp_cell = rng.uniform(_AMP_JITTER[0], _AMP_JITTER[1], (n, n)).astype(np.float32)
    parity = (np.arange(n)[:, None] + np.arange(n)[None, :]) % 2
    tone_cell = (2.0 * parity - 1.0).astype(np.float32)

    on = np.empty((size, size), dtype=bool)
    amp = np.empty((size, size), dtype=np.float32)
    tone = np.empty((size, size), dtype=np.float32)
    xs = np.arange(size, dtype=np.float32)
    bx = np.minimum((xs / cell_px).astype(np.int64) + 1, n - 2)
    block = 512
    for y0 in range(0, size, block):
        y1 = min(y0 + block, size)
        ys = np.arange(y0, y1, dtype=np.float32)
        by = np.minimum((ys / cell_px).astype(np.int64) + 1, n - 2)
        best = np.full((y1 - y0, size), np.inf, dtype=np.float32)
        best_iy = np.zeros((y1 - y0, size), dtype=np.int64)
        best_ix = np.zeros((y1 - y0, size), dtype=np.int64)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                iy = by[:, None] + dy
                ix = (bx + dx)[None, :]
                d2 = (seed_x[iy, ix] - xs[None, :]) ** 2 + (seed_y[iy, ix] - ys[:, None]) ** 2
                better = d2 < best
                best = np.where(better, d2, best)
                best_iy = np.where(better, iy, best_iy)
                best_ix = np.where(better, ix, best_ix)
        on[y0:y1] = on_cell[best_iy, best_ix]
        amp[y0:y1] = amp_cell[best_iy, best_ix]
        tone[y0:y1] = tone_cell[best_iy, best_ix]
    return on, amp, tone


def render_case(spec: PhantomSpec, case_id: str, label: str) -> PhantomCase:
    """Render one phantom slide; pure function of (spec, case_id, label)."""
    if label not in LABELS:
        raise UnknownLabel(label)
    size = spec.slide_px
    rng = stream(spec.seed, "phantom", case_id)

    field = _smooth_field(size, _TISSUE_FIELD_CELLS, rng)
    cut = float(np.quantile(field, 1.0 - spec.tissue_fraction))
    tissue = field >= cut
    del field

    luma = np.full((size, size), _TISSUE_LEVEL, dtype=np.float32)
    luma += _noise_bed(size, rng)

    cell_px = spec.macro_scale_um / spec.pitch_um
    on, amp, tone = _cell_maps(size, cell_px, rng)
    positive = label == LABEL_POS
    if positive and spec.macro_amplitude > 0:
        # soften cell borders so a window much smaller than a cell sees a
        # gentle gradient, not a step; interiors keep the exact +-1 tone
        soft = _box_blur(tone, max(3, int(cell_px * 0.5)))
        luma += spec.macro_amplitude * soft
        del soft
    del tone

    texture = np.zeros((size, size), dtype=bool)
    if positive and spec.micro_amplitude > 0:
        period_px = spec.micro_period_um / spec.pitch_um
        phase_x, phase_y = rng.uniform(0.0, period_px, 2)
        xs = np.arange(size, dtype=np.float32)
        wave_x = np.sin((2.0 * np.pi / period_px) * (xs + phase_x)).astype(np.float32)
        wave_y = np.sin((2.0 * np.pi / period_px) * (xs + phase_y)).astype(np.float32)
        plaid = 0.5 * (wave_x[None, :] + wave_y[:, None])
        luma += (spec.micro_amplitude * on) * amp * plaid
        texture = tissue & on
        del plaid
    del on, amp

    glass = _GLASS_LEVEL + _GLASS_NOISE * rng.standard_normal((size, size)).astype(np.float32)
    luma = np.where(tissue, luma, glass)
    del glass

    shift_r = spec.color_shift if positive else 0.0
    channels = []
    for band, tint in enumerate(_TISSUE_TINT):
        chan = luma + np.float32(tint) * tissue
        if shift_r and band == 0:
            chan = chan + np.float32(shift_r) * tissue
        if shift_r and band == 2:
            chan = chan - np.float32(shift_r) * tissue
        channels.append(chan)
    rgb = np.stack(channels, axis=-1)
    del channels, luma
    pixels = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    return PhantomCase(pixels=pixels, tissue=tissue, texture=texture)


def generate_phantom(spec: PhantomSpec, out_dir: str | Path) -> DatasetManifest:
    """Render a whole phantom dataset to disk.

    Writes ``<case>.png`` per slide, ground-truth masks
    ``<case>.tissue.png`` / ``<case>.texture.png``, and ``manifest.tsv``.
    Deterministic: same spec, same bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases: list[CaseRecord] = []
    ids = [("pos%03d" % i, LABEL_POS) for i in range(spec.n_cases_pos)]
    ids += [("neg%03d" % i, LABEL_NEG) for i in range(spec.n_cases_neg)]
    for case_id, label in ids:
        rendered = render_case(spec, case_id, label)
        slide_path = out / ("%s.png" % case_id)
        _write_png(slide_path, rendered.pixels)
        _write_png(out / ("%s.tissue.png" % case_id), rendered.tissue.astype(np.uint8) * 255)
        _write_png(out / ("%s.texture.png" % case_id), rendered.texture.astype(np.uint8) * 255)
        cases.append(CaseRecord(case_id, slide_path, None, label, spec.pitch_um))
    manifest_path = out / "manifest.tsv"
    save_manifest(cases, manifest_path)
    return load_manifest(manifest_path)


def load_truth(out_dir: str | Path, case_id: str) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth (tissue, texture) boolean maps for a generated case."""
    out = Path(out_dir)
    return (
        _read_mask(out / ("%s.tissue.png" % case_id)),
        _read_mask(out / ("%s.texture.png" % case_id)),
    )
