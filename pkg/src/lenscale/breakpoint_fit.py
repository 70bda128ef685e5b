"""Exact least-absolute-error line and two-segment fits.

The accuracy-vs-length curves are short (a dozen to eighteen points), so both
fits are exhaustive rather than iterative:

* an L1-optimal line can always be chosen through two of the data points, so
  ``fit_l1_line`` enumerates all point pairs with distinct x and keeps the
  line with the smallest total absolute residual (ties: smaller |slope|,
  then smaller intercept);
* ``fit_piecewise`` tries every admissible break (midpoints between
  consecutive distinct x values with at least two points on each side), fits
  both sides exactly, and keeps the break with the smallest combined
  residual.

Exact residual ties between breaks can only arise on constructed data. They
are resolved by geometry before position: a tied break sitting before the
crossing point of its own two lines splits the data where the segments have
not yet diverged, so tied breaks at or past their crossing win over tied
breaks before it; within the same class the leftmost candidate wins. On a
pure plateau (identical segment lines everywhere, no crossing) this reduces
to the leftmost candidate.

The break of the two-segment fit is the characteristic length of a sweep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DegenerateX, InsufficientPoints

__all__ = [
    "LineFit",
    "PiecewiseFit",
    "fit_l1_line",
    "fit_piecewise",
    "write_fit_json",
]


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    residual: float

    def predict(self, x: float) -> float:
        return self.slope * x + self.intercept


@dataclass(frozen=True)
class PiecewiseFit:
    break_x: float
    left: LineFit
    right: LineFit
    residual: float
    candidates: tuple[tuple[float, float], ...]  # (break_x, total residual)


def _as_points(points: Iterable[Sequence[float]]) -> list[tuple[float, float]]:
    pts = [(float(x), float(y)) for x, y in points]
    return sorted(pts)


def fit_l1_line(points: Iterable[Sequence[float]]) -> LineFit:
    """Exact minimizer of sum |y_i - (a x_i + b)| over all lines.

    Enumerates lines through every pair of points with distinct x; one of
    them attains the optimum.
    """
    pts = _as_points(points)
    if len(pts) < 2:
        raise InsufficientPoints("need at least 2 points, got %d" % len(pts))
    if len({x for x, _ in pts}) < 2:
        raise DegenerateX("all x values coincide")
    best: LineFit | None = None
    for i in range(len(pts)):
        xi, yi = pts[i]
        for j in range(i + 1, len(pts)):
            xj, yj = pts[j]
            if xj == xi:
                continue
            a = (yj - yi) / (xj - xi)
            b = yi - a * xi
            r = 0.0
            for x, y in pts:
                r += abs(y - (a * x + b))
            if (
                best is None
                or r < best.residual
                or (r == best.residual and abs(a) < abs(best.slope))
                or (r == best.residual and abs(a) == abs(best.slope) and b < best.intercept)
            ):
                best = LineFit(slope=a, intercept=b, residual=r)
    assert best is not None
    return best


def fit_piecewise(points: Iterable[Sequence[float]]) -> PiecewiseFit:
    """Two-segment L1 fit with an exhaustive break search."""
    pts = _as_points(points)
    if len(pts) < 4:
        raise InsufficientPoints("need at least 4 points, got %d" % len(pts))
    xs = sorted({x for x, _ in pts})
    if len(xs) < 2:
        raise DegenerateX("all x values coincide")
    candidates = []
    for a, b in zip(xs, xs[1:]):
        mid = 0.5 * (a + b)
        left = [p for p in pts if p[0] <= mid]
        right = [p for p in pts if p[0] > mid]
        if len(left) >= 2 and len(right) >= 2:
            candidates.append((mid, left, right))
    if not candidates:
        raise InsufficientPoints("no break admits 2 points on each side")
    table: list[tuple[float, float]] = []
    fits: list[tuple[float, LineFit, LineFit, float]] = []
    for mid, left, right in candidates:
        try:
            lf = fit_l1_line(left)
            rf = fit_l1_line(right)
        except DegenerateX:
            continue
        total = lf.residual + rf.residual
        table.append((mid, total))
        fits.append((mid, lf, rf, total))
    if not fits:
        raise DegenerateX("every candidate split left a vertical segment")
    best_total = min(f[3] for f in fits)
    tied = [f for f in fits if f[3] == best_total]
    chosen = tied[0]
    if len(tied) > 1:
        # geometry-consistent ties first (break at or past its own crossing),
        # leftmost within the class; a plateau has no crossing anywhere and
        # stays leftmost
        consistent = [f for f in tied if _at_or_past_crossing(f[0], f[1], f[2])]
        if consistent:
            chosen = consistent[0]
    mid, lf, rf, total = chosen
    return PiecewiseFit(
        break_x=mid, left=lf, right=rf, residual=total, candidates=tuple(table)
    )


def _at_or_past_crossing(break_x: float, left: LineFit, right: LineFit) -> bool:
    if left.slope == right.slope:
        return False
    cross = (right.intercept - left.intercept) / (left.slope - right.slope)
    return break_x >= cross


def write_fit_json(fit: PiecewiseFit, path: str | Path, **extra: object) -> None:
    """Serialize a fit (plus caller context like axis and units) to JSON."""
    doc = {
        "break_x": fit.break_x,
        "left": {"slope": fit.left.slope, "intercept": fit.left.intercept,
                 "residual": fit.left.residual},
        "right": {"slope": fit.right.slope, "intercept": fit.right.intercept,
                  "residual": fit.right.residual},
        "residual": fit.residual,
        "candidates": [{"break_x": b, "residual": r} for b, r in fit.candidates],
    }
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
