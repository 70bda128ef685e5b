"""Cross-validated accuracy sweeps over a ladder of length scales.

One sweep answers: how does tile-level accuracy change as one knob (the
resolvable-feature length or the visible-field length) moves through its
ladder? Tiles are sampled once per case and reused at every level and fold;
each (level, fold) job trains a fresh scorer on tiles transformed to that
level and evaluates on the fold's held-out cases. Everything downstream
(curve fitting, slope maps) consumes the persisted per-tile scores.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .errors import CohortTooSmall, InvalidSpec, LenscaleError, PartialSweep
from .predictor import ScorerConfig, score_many, train
from .scale_transforms import LevelLadder, apply_level
from .seeds import derive_key, stream
from .slide_io import LABEL_POS, DatasetManifest, load_slide
from .tiling import Tile, build_tissue_mask, sample_tiles

__all__ = [
    "Fold",
    "SplitPlan",
    "LevelResult",
    "SweepResult",
    "make_splits",
    "run_sweep",
    "write_sweep_csvs",
]

N_FOLDS = 3
# the published protocol's cohort shape keeps its published test size
_PROTOCOL_COHORT = (65, 93)
_PROTOCOL_TEST_PER_CLASS = 20
_MIN_CLASS = 6


@dataclass(frozen=True)
class Fold:
    """Case ids for one train/test experiment."""

    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


@dataclass(frozen=True)
class SplitPlan:
    """Three folds with pairwise-disjoint test sets."""

    folds: tuple[Fold, ...]
    seed: int

    def __post_init__(self) -> None:
        if len(self.folds) != N_FOLDS:
            raise InvalidSpec("a split plan holds exactly %d folds" % N_FOLDS)
        seen_tests: set[str] = set()
        for k, fold in enumerate(self.folds):
            overlap = set(fold.train_ids) & set(fold.test_ids)
            if overlap:
                raise InvalidSpec(
                    "fold %d trains and tests on %s" % (k, sorted(overlap)))
            double = seen_tests & set(fold.test_ids)
            if double:
                raise InvalidSpec(
                    "cases %s appear in two test sets" % sorted(double))
            seen_tests |= set(fold.test_ids)

    def digest(self) -> str:
        payload = json.dumps(
            [[list(f.train_ids), list(f.test_ids)] for f in self.folds])
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class LevelResult:
    """Outcome of one ladder level: three fold accuracies or a failure."""

    axis: str
    level_index: int
    tag: str
    length_um: float
    fold_accuracies: tuple[float, ...] | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def mean_accuracy(self) -> float | None:
        if self.fold_accuracies is None:
            return None
        return sum(self.fold_accuracies) / len(self.fold_accuracies)


@dataclass(frozen=True)
class SweepResult:
    axis: str
    root_seed: int
    tiles_per_case: int
    eval_tiles_per_fold: int
    plan: SplitPlan
    levels: tuple[LevelResult, ...]
    # rows (level_index, fold, slide_id, x, y, label, score)
    scores: tuple[tuple, ...]

    def failed_levels(self) -> list[LevelResult]:
        return [lv for lv in self.levels if not lv.ok]

    def mean_points(self) -> list[tuple[float, float]]:
        """(length_um, mean accuracy) of the successful levels, in order."""
        return [(lv.length_um, lv.mean_accuracy) for lv in self.levels if lv.ok]


def make_splits(manifest: DatasetManifest, seed: int) -> SplitPlan:
    """Assign cases to three folds with disjoint, class-balanced test sets.

    Test size per class is min(total // 6, smaller class // 3), except that
    a cohort shaped like the published protocol (65 + 93) keeps its
    published 20-per-class test sets. Leftover cases train in every fold.
    """
    pos = sorted(c.case_id for c in manifest.cases if c.label == LABEL_POS)
    neg = sorted(c.case_id for c in manifest.cases if c.label != LABEL_POS)
    smaller = min(len(pos), len(neg))
    if smaller < _MIN_CLASS:
        raise CohortTooSmall(
            "need at least %d cases per class, got %d positive / %d negative"
            % (_MIN_CLASS, len(pos), len(neg)))
    if tuple(sorted((len(pos), len(neg)))) == tuple(sorted(_PROTOCOL_COHORT)):
        per_class = _PROTOCOL_TEST_PER_CLASS
    else:
        per_class = min((len(pos) + len(neg)) // (N_FOLDS * 2),
                        smaller // N_FOLDS)

    rng = stream(seed, "splits")
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    all_ids = set(pos) | set(neg)
    folds = []
    for k in range(N_FOLDS):
        test = (pos[k * per_class:(k + 1) * per_class]
                + neg[k * per_class:(k + 1) * per_class])
        train_ids = sorted(all_ids - set(test))
        folds.append(Fold(tuple(train_ids), tuple(sorted(test))))
    return SplitPlan(tuple(folds), seed)


def _job_seed(root_seed: int, level, fold: int) -> int:
    # the untransformed level is the same job on either axis, so its tag
    # carries no axis and the two sweeps get bit-identical identity results
    tag = "identity" if level.is_identity else "%s:%d" % (level.axis, level.index)
    return derive_key(root_seed, "sweep", tag, fold)


def _accuracy(scores, tiles: Sequence[Tile], threshold: float) -> float:
    hits = sum(
        (float(s) >= threshold) == (t.label == LABEL_POS)
        for s, t in zip(scores, tiles)
    )
    return hits / len(tiles)


class _Checkpoint:
    """Per-level progress ledger so an aborted sweep resumes, not restarts."""

    def __init__(self, path: Path, header: dict):
        self.path = path
        self.header = header
        self.done: dict[int, dict] = {}
        if path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        if not lines:
            return
        try:
            head = json.loads(lines[0])
        except ValueError:
            return
        if head != self.header:
            # different sweep parameters: the old file is dead weight
            self.path.unlink()
            return
        for ln in lines[1:]:
            try:
                rec = json.loads(ln)
            except ValueError:
                continue  # torn final line from an aborted run
            self.done[rec["level_index"]] = rec

    def record(self, rec: dict) -> None:
        fresh = not self.path.exists()
        with open(self.path, "a", encoding="utf-8") as fh:
            if fresh:
                fh.write(json.dumps(self.header) + "\n")
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
            os.fsync(fh.fileno())


def _fold_job(level, fold: Fold, k: int, transformed, scorer_config,
              root_seed: int):
    config = replace(scorer_config, seed=_job_seed(root_seed, level, k))
    train_tiles = [t for cid in fold.train_ids for t in transformed[cid]]
    test_tiles = [t for cid in fold.test_ids for t in transformed[cid]]
    model = train(train_tiles, config)
    scores = score_many(model, test_tiles)
    acc = _accuracy(scores, test_tiles, config.threshold)
    rows = [(level.index, k, t.slide_id, t.x, t.y, t.label, float(s))
            for t, s in zip(test_tiles, scores)]
    return acc, rows


def run_sweep(manifest: DatasetManifest, axis: str, ladder: LevelLadder,
              scorer_config: ScorerConfig, tiles_per_case: int = 50,
              root_seed: int = 0,
              checkpoint_path: str | Path | None = None,
              jobs: int = 1) -> SweepResult:
    """Train and evaluate one model per (level, fold); aggregate accuracies.

    Raises PartialSweep (with the result attached) when at least one level
    failed; per-level errors never abort the remaining levels. ``jobs`` caps
    how many folds run concurrently; results are assembled in fold order, so
    the output is identical for any cap.
    """
    if ladder.axis != axis:
        raise InvalidSpec("ladder is for axis %r, sweep asked for %r"
                          % (ladder.axis, axis))
    if tiles_per_case < 1:
        raise InvalidSpec("tiles_per_case must be positive")
    if jobs < 1:
        raise InvalidSpec("jobs must be positive")

    plan = make_splits(manifest, root_seed)
    tiles_by_case: dict[str, list[Tile]] = {}
    for case in manifest.cases:
        slide = load_slide(case)
        mask = build_tissue_mask(slide)
        tiles_by_case[case.case_id] = sample_tiles(
            slide, mask, tiles_per_case, root_seed)
        del slide, mask

    n_eval = len(plan.folds[0].test_ids) * tiles_per_case

    checkpoint = None
    if checkpoint_path is not None:
        header = {
            "kind": "sweep-checkpoint",
            "axis": axis,
            "root_seed": root_seed,
            "tiles_per_case": tiles_per_case,
            "ladder": [lv.tag for lv in ladder.levels],
            "plan": plan.digest(),
        }
        checkpoint = _Checkpoint(Path(checkpoint_path), header)

    level_results: list[LevelResult] = []
    score_rows: list[tuple] = []
    for level in ladder.levels:
        if checkpoint is not None and level.index in checkpoint.done:
            rec = checkpoint.done[level.index]
            accs = rec["fold_accuracies"]
            level_results.append(LevelResult(
                axis, level.index, level.tag, level.length_um,
                tuple(accs) if accs is not None else None, rec["error"]))
            score_rows.extend(tuple(row) for row in rec["scores"])
            continue

        transformed = {
            cid: [apply_level(t, level) for t in tiles]
            for cid, tiles in tiles_by_case.items()
        }
        fold_accs: list[float] = []
        level_rows: list[tuple] = []
        error = None
        try:
            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    outs = list(pool.map(
                        lambda kf: _fold_job(level, kf[1], kf[0], transformed,
                                             scorer_config, root_seed),
                        enumerate(plan.folds)))
            else:
                outs = [_fold_job(level, fold, k, transformed, scorer_config,
                                  root_seed)
                        for k, fold in enumerate(plan.folds)]
            for acc, rows in outs:
                fold_accs.append(acc)
                level_rows.extend(rows)
        except LenscaleError as exc:
            error = "%s: %s" % (type(exc).__name__, exc)

        if error is None:
            result_row = LevelResult(axis, level.index, level.tag,
                                     level.length_um, tuple(fold_accs))
            score_rows.extend(level_rows)
        else:
            result_row = LevelResult(axis, level.index, level.tag,
                                     level.length_um, None, error)
            level_rows = []
        level_results.append(result_row)
        if checkpoint is not None:
            checkpoint.record({
                "level_index": level.index,
                "fold_accuracies": list(result_row.fold_accuracies)
                if result_row.ok else None,
                "error": error,
                "scores": [list(row) for row in level_rows],
            })

    result = SweepResult(axis=axis, root_seed=root_seed,
                         tiles_per_case=tiles_per_case,
                         eval_tiles_per_fold=n_eval, plan=plan,
                         levels=tuple(level_results),
                         scores=tuple(score_rows))
    failed = result.failed_levels()
    if failed:
        raise PartialSweep(
            "%d of %d levels failed (first: %s %s)"
            % (len(failed), len(ladder.levels), failed[0].tag, failed[0].error),
            result=result)
    return result


def write_sweep_csvs(result: SweepResult, out_dir: str | Path) -> dict[str, Path]:
    """Persist per-fold, per-level-mean, and per-tile score tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "sweep": out / "sweep.csv",
        "sweep_mean": out / "sweep_mean.csv",
        "scores": out / "scores.csv",
    }
    with open(paths["sweep"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "level_index", "length_um", "fold", "accuracy"])
        for lv in result.levels:
            if not lv.ok:
                continue
            for k, acc in enumerate(lv.fold_accuracies):
                writer.writerow([lv.axis, lv.level_index, repr(lv.length_um),
                                 k, repr(acc)])
    with open(paths["sweep_mean"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "level_index", "length_um", "mean_accuracy"])
        for lv in result.levels:
            if not lv.ok:
                continue
            writer.writerow([lv.axis, lv.level_index, repr(lv.length_um),
                             repr(lv.mean_accuracy)])
    with open(paths["scores"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level_index", "fold", "slide_id", "x", "y",
                         "label", "score"])
        for row in result.scores:
            level_index, fold, slide_id, x, y, label, score = row
            writer.writerow([level_index, fold, slide_id, x, y, label,
                             repr(score)])
    return paths
