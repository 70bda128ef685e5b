"""Command-line entry points and artifact bundling.

Every subcommand resolves its settings the same way: hard defaults, then a
key=value config file (``--config``), then explicit flags, strongest last.
Artifacts are staged in a scratch directory and renamed into place only when
complete, so an interrupted run never leaves a truncated CSV behind. Exit
status is 0 for success, 1 when the request itself is invalid (bad flag,
missing file, cohort too small), 2 when a valid request fails at runtime.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, fields, replace
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .breakpoint_fit import PiecewiseFit, fit_piecewise, write_fit_json
from .errors import (
    CohortTooSmall,
    DegenerateX,
    GridTooSmall,
    InsufficientPoints,
    InvalidSpec,
    LenscaleError,
    MalformedManifest,
    MissingFile,
    PartialSweep,
)
from .predictor import ScorerConfig, close_external_channels, ping_external, train
from .scale_transforms import apply_level, make_ladder, write_ladder_csv
from .seeds import derive_key
from .slide_io import PhantomSpec, generate_phantom, load_manifest, load_slide
from .slope_map import (
    build_slope_map,
    concat_regional_map,
    render_overlay,
    write_slope_csv,
)
from .sweep import run_sweep, write_sweep_csvs
from .tiling import build_tissue_mask, sample_tiles, write_tile_csv

__all__ = ["RunConfig", "main", "plot_curve"]

SUBCOMMANDS = ("phantom", "tile", "sweep", "fit", "slopemap", "report",
               "serve-check")


class UsageError(Exception):
    """Bad flags or config: the request never made sense."""


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings of one run, after file/flag merging.

    Seeds are always explicit integers; nothing falls back to the clock.
    """

    manifest: Path | None = None
    axis: str = "rfl"
    levels: int | None = None
    tiles_per_case: int = 50
    seed: int = 0
    scorer: str = "builtin"
    epsilon: float = 0.1
    jobs: int = 1
    out: Path | None = None
    epochs: int = 40
    case: str | None = None
    sweep_dir: Path | None = None
    # phantom geometry
    cases_per_class: int = 6
    micro_period: float = 4.0
    macro_scale: float = 40.0
    color_shift: float = 0.0
    tissue_fraction: float = 0.7
    slide_px: int = 4480
    pitch: float = 0.51

    def scorer_config(self) -> ScorerConfig:
        kind, endpoint = parse_scorer(self.scorer)
        return ScorerConfig(seed=self.seed, epochs=self.epochs, kind=kind,
                            endpoint=endpoint)


def parse_scorer(text: str) -> tuple[str, str | None]:
    if text == "builtin":
        return "builtin", None
    if text.startswith("external="):
        endpoint = text[len("external="):]
        if not endpoint:
            raise UsageError("--scorer external= needs an address after '='")
        return "external", endpoint
    raise UsageError(
        "--scorer must be 'builtin' or 'external=ADDR', got %r" % text)


# --- config file ------------------------------------------------------------

_INT_KEYS = {"levels", "tiles_per_case", "seed", "jobs", "epochs",
             "cases_per_class", "slide_px"}
_FLOAT_KEYS = {"epsilon", "micro_period", "macro_scale", "color_shift",
               "tissue_fraction", "pitch"}
_PATH_KEYS = {"manifest", "out", "sweep_dir"}
_STR_KEYS = {"axis", "scorer", "case"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _PATH_KEYS | _STR_KEYS


def read_config_file(path: Path) -> dict:
    """Parse a key=value run file; '#' starts a comment, blanks are skipped."""
    if not path.is_file():
        raise UsageError("--config file not found: %s" % path)
    values: dict = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError("%s:%d: expected key=value, got %r"
                             % (path, lineno, raw.strip()))
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _ALL_KEYS:
            raise UsageError("%s:%d: unknown key %r" % (path, lineno, key))
        try:
            if key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key in _PATH_KEYS:
                values[key] = Path(value)
            else:
                values[key] = value
        except ValueError:
            raise UsageError("%s:%d: bad value for %s: %r"
                             % (path, lineno, key, value))
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then config file, then flags."""
    merged: dict = {}
    if getattr(args, "config", None) is not None:
        merged.update(read_config_file(Path(args.config)))
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            merged[f.name] = Path(flag) if f.name in _PATH_KEYS else flag
    config = RunConfig(**merged)
    if config.axis not in ("rfl", "mfl"):
        raise UsageError("--axis must be rfl or mfl, got %r" % config.axis)
    parse_scorer(config.scorer)
    for name, value, low in (("--tiles-per-case", config.tiles_per_case, 1),
                             ("--jobs", config.jobs, 1),
                             ("--epochs", config.epochs, 0)):
        if value < low:
            raise UsageError("%s must be >= %d, got %d" % (name, low, value))
    if not 0.0 < config.epsilon <= 1.0:
        raise UsageError("--epsilon must lie in (0, 1], got %g" % config.epsilon)
    if config.levels is not None and config.levels < 2:
        raise UsageError("--levels must be >= 2, got %d" % config.levels)
    return config


def _require(config: RunConfig, *names: str) -> None:
    for name in names:
        if getattr(config, name) is None:
            raise UsageError("--%s is required for this subcommand"
                             % name.replace("_", "-"))
    if "manifest" in names and not Path(config.manifest).is_file():
        raise UsageError("--manifest file not found: %s" % config.manifest)
    if "sweep_dir" in names and not Path(config.sweep_dir).is_dir():
        raise UsageError("--sweep-dir directory not found: %s" % config.sweep_dir)


# --- atomic artifact staging ------------------------------------------------


class _Stage:
    """Scratch directory whose files are renamed into the target at the end.

    os.replace within one filesystem makes each artifact appear whole or not
    at all; abandoning the stage on error leaves the target untouched.
    """

    def __init__(self, out: Path):
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=".stage-", dir=out))

    def path(self, rel: str) -> Path:
        p = self.dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def publish(self) -> list[Path]:
        published = []
        for p in sorted(self.dir.rglob("*")):
            if p.is_dir():
                continue
            rel = p.relative_to(self.dir)
            dest = self.out / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(p, dest)
            published.append(dest)
        self.discard()
        return published

    def discard(self) -> None:
        shutil.rmtree(self.dir, ignore_errors=True)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# --- plotting ---------------------------------------------------------------


def plot_curve(mean_points, fit: PiecewiseFit | None, path: str | Path,
               fold_points=None, axis: str = "rfl") -> None:
    """Accuracy-versus-length figure: fold scatter, mean line, fitted bend.

    ``mean_points`` are (length_um, mean_accuracy); ``fold_points`` optional
    (length_um, accuracy) singles. Without a fit the figure is scatter only.
    The output is byte-stable for fixed inputs: fixed canvas, no timestamps.
    """
    means = sorted((float(x), float(y)) for x, y in mean_points)
    if not means:
        raise InvalidSpec("nothing to plot: no mean points")
    fig, ax = plt.subplots(figsize=(7.0, 4.5), dpi=100)
    try:
        if fold_points:
            fx = [float(x) for x, _ in fold_points]
            fy = [float(y) for _, y in fold_points]
            ax.scatter(fx, fy, s=12, color="#9aa7b0", zorder=2,
                       label="fold accuracy")
        ax.plot([x for x, _ in means], [y for _, y in means], "o-",
                color="#1f5fa6", linewidth=1.6, markersize=4, zorder=3,
                label="mean accuracy")
        if fit is not None:
            xs = [x for x, _ in means]
            left_x = [x for x in xs if x <= fit.break_x] + [fit.break_x]
            right_x = [fit.break_x] + [x for x in xs if x > fit.break_x]
            ax.plot(left_x, [fit.left.predict(x) for x in left_x],
                    color="#c23b22", linewidth=1.2, zorder=4)
            ax.plot(right_x, [fit.right.predict(x) for x in right_x],
                    color="#c23b22", linewidth=1.2, zorder=4,
                    label="segment fit")
            ax.axvline(fit.break_x, color="#c23b22", linestyle="--",
                       linewidth=0.9, zorder=1)
            ax.annotate("break %.3g um" % fit.break_x,
                        xy=(fit.break_x, 0.5), xycoords=("data", "axes fraction"),
                        xytext=(6, 0), textcoords="offset points",
                        fontsize=9, color="#c23b22")
        ax.set_xlabel("length (um)")
        ax.set_ylabel("tile accuracy")
        ax.set_title("accuracy vs %s length" % axis)
        ax.legend(loc="best", fontsize=8)
        ax.grid(True, alpha=0.25)
        fig.savefig(path, format="png", metadata={"Software": None})
    finally:
        plt.close(fig)


# --- shared pieces ----------------------------------------------------------


def _build_ladder(config: RunConfig, pitch_um: float):
    try:
        return make_ladder(config.axis, pitch_um, config.levels)
    except ValueError as exc:
        raise UsageError("--levels: %s" % exc)


def _sample_all_tiles(manifest, tiles_per_case: int, seed: int):
    tiles = []
    for case in manifest.cases:
        slide = load_slide(case)
        mask = build_tissue_mask(slide)
        tiles.extend(sample_tiles(slide, mask, tiles_per_case, seed))
    return tiles


def _train_map_models(manifest, ladder, config: RunConfig):
    """One model per ladder level, trained on the whole cohort.

    Slope maps are diagnostics of a deployed model, not held-out estimates,
    so unlike sweeps there is no fold structure here.
    """
    base = config.scorer_config()
    tiles = _sample_all_tiles(manifest, config.tiles_per_case, config.seed)
    models = []
    identity_model = None
    for level in ladder.levels:
        cfg = replace(base, seed=derive_key(config.seed, "slopemap", level.tag))
        model = train([apply_level(t, level) for t in tiles], cfg)
        models.append(model)
        if level.is_identity:
            identity_model = model
    if identity_model is None:
        cfg = replace(base, seed=derive_key(config.seed, "slopemap", "identity"))
        identity_model = train(tiles, cfg)
    return models, identity_model


def _map_cases(manifest, config: RunConfig):
    if config.case is None:
        return list(manifest.cases)
    try:
        return [manifest.by_id(config.case)]
    except KeyError:
        raise UsageError("--case %r is not in %s" % (config.case, config.manifest))


def _write_maps(manifest, config: RunConfig, stage: _Stage) -> list[str]:
    wanted = _map_cases(manifest, config)
    ladder = _build_ladder(config, manifest.cases[0].pitch_um)
    models, identity_model = _train_map_models(manifest, ladder, config)
    notes = []
    for case in wanted:
        slide = load_slide(case)
        mask = build_tissue_mask(slide)
        smap = build_slope_map(slide, mask, models, ladder, identity_model,
                               epsilon=config.epsilon, jobs=config.jobs)
        write_slope_csv(smap, stage.path("slopemap_%s.csv" % case.case_id))
        render_overlay(slide, smap).save(
            stage.path("overlay_%s.png" % case.case_id))
        try:
            regional = concat_regional_map(smap, 5)
        except GridTooSmall:
            notes.append("%s: grid %dx%d too small for 5x5 regions"
                         % (case.case_id, smap.n_rows, smap.n_cols))
        else:
            write_slope_csv(regional, stage.path(
                "slopemap_regional_%s.csv" % case.case_id))
    return notes


def _read_sweep_tables(sweep_dir: Path):
    mean_path = sweep_dir / "sweep_mean.csv"
    if not mean_path.is_file():
        raise UsageError("no sweep_mean.csv in --sweep-dir %s" % sweep_dir)
    with open(mean_path, newline="") as fh:
        mean_rows = list(csv.DictReader(fh))
    if not mean_rows:
        raise UsageError("%s holds no levels" % mean_path)
    axis = mean_rows[0]["axis"]
    means = [(float(r["length_um"]), float(r["mean_accuracy"]))
             for r in mean_rows]
    folds = []
    fold_path = sweep_dir / "sweep.csv"
    if fold_path.is_file():
        with open(fold_path, newline="") as fh:
            folds = [(float(r["length_um"]), float(r["accuracy"]))
                     for r in csv.DictReader(fh)]
    return axis, means, folds


def _fit_artifacts(axis: str, means, folds, stage: _Stage) -> PiecewiseFit:
    fit = fit_piecewise(means)
    write_fit_json(fit, stage.path("fit.json"), axis=axis, unit="um",
                   n_levels=len(means))
    plot_curve(means, fit, stage.path("curve.png"), fold_points=folds,
               axis=axis)
    return fit


# --- subcommands ------------------------------------------------------------


def cmd_phantom(config: RunConfig) -> int:
    _require(config, "out")
    out = Path(config.out)
    if out.exists() and any(out.iterdir()):
        raise UsageError("--out %s already exists and is not empty" % out)
    spec = PhantomSpec(
        n_cases_pos=config.cases_per_class,
        n_cases_neg=config.cases_per_class,
        micro_period_um=config.micro_period,
        macro_scale_um=config.macro_scale,
        color_shift=config.color_shift,
        tissue_fraction=config.tissue_fraction,
        seed=config.seed,
        pitch_um=config.pitch,
        slide_px=config.slide_px,
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".phantom-", dir=out.parent))
    try:
        manifest = generate_phantom(spec, stage)
        if out.exists():
            out.rmdir()
        os.replace(stage, out)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    print("phantom: %d cases -> %s" % (len(manifest.cases), out))
    return 0


def cmd_tile(config: RunConfig) -> int:
    _require(config, "manifest", "out")
    manifest = load_manifest(config.manifest)
    tiles = _sample_all_tiles(manifest, config.tiles_per_case, config.seed)
    stage = _Stage(Path(config.out))
    try:
        write_tile_csv(tiles, stage.path("tiles.csv"))
        stage.publish()
    except BaseException:
        stage.discard()
        raise
    print("tile: %d tiles from %d cases -> %s"
          % (len(tiles), len(manifest.cases), config.out))
    return 0


def cmd_sweep(config: RunConfig) -> int:
    _require(config, "manifest", "out")
    manifest = load_manifest(config.manifest)
    ladder = _build_ladder(config, manifest.cases[0].pitch_um)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    partial = None
    try:
        result = run_sweep(manifest, config.axis, ladder,
                           config.scorer_config(),
                           tiles_per_case=config.tiles_per_case,
                           root_seed=config.seed,
                           checkpoint_path=out / "sweep.ckpt",
                           jobs=config.jobs)
    except PartialSweep as exc:
        partial = exc
        result = exc.result
    stage = _Stage(out)
    try:
        write_ladder_csv(ladder, stage.path("ladder.csv"))
        write_sweep_csvs(result, stage.dir)
        stage.publish()
    except BaseException:
        stage.discard()
        raise
    if partial is not None:
        print("sweep: %s" % partial, file=sys.stderr)
        print("sweep: partial tables -> %s" % out, file=sys.stderr)
        return 2
    print("sweep: %d levels x %d folds -> %s"
          % (len(result.levels), len(result.plan.folds), out))
    return 0


def cmd_fit(config: RunConfig) -> int:
    _require(config, "sweep_dir", "out")
    axis, means, folds = _read_sweep_tables(Path(config.sweep_dir))
    stage = _Stage(Path(config.out))
    try:
        fit = _fit_artifacts(axis, means, folds, stage)
        stage.publish()
    except BaseException:
        stage.discard()
        raise
    print("fit: break at %.4g um (residual %.4g) -> %s"
          % (fit.break_x, fit.residual, config.out))
    return 0


def cmd_slopemap(config: RunConfig) -> int:
    _require(config, "manifest", "out")
    manifest = load_manifest(config.manifest)
    stage = _Stage(Path(config.out))
    try:
        notes = _write_maps(manifest, config, stage)
        published = stage.publish()
    except BaseException:
        stage.discard()
        raise
    for note in notes:
        print("slopemap: %s" % note, file=sys.stderr)
    print("slopemap: %d artifacts -> %s" % (len(published), config.out))
    return 0


def cmd_report(config: RunConfig) -> int:
    _require(config, "manifest", "out")
    manifest = load_manifest(config.manifest)
    ladder = _build_ladder(config, manifest.cases[0].pitch_um)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)

    partial = None
    try:
        result = run_sweep(manifest, config.axis, ladder,
                           config.scorer_config(),
                           tiles_per_case=config.tiles_per_case,
                           root_seed=config.seed,
                           checkpoint_path=out / "sweep.ckpt",
                           jobs=config.jobs)
    except PartialSweep as exc:
        partial = exc
        result = exc.result

    stage = _Stage(out)
    try:
        write_ladder_csv(ladder, stage.path("ladder.csv"))
        write_sweep_csvs(result, stage.dir)
        notes = []
        if partial is None:
            means = result.mean_points()
            folds = [(lv.length_um, acc) for lv in result.levels if lv.ok
                     for acc in lv.fold_accuracies]
            _fit_artifacts(config.axis, means, folds, stage)
            notes.extend(_write_maps(manifest, config, stage))
        else:
            notes.append("sweep incomplete, fit and maps skipped: %s" % partial)
        index = {
            "config": _config_doc(config),
            "axis": config.axis,
            "levels": [lv.tag for lv in ladder.levels],
            "split_digest": result.plan.digest(),
            "notes": notes,
            "artifacts": {
                str(p.relative_to(stage.dir)): _sha256(p)
                for p in sorted(stage.dir.rglob("*")) if p.is_file()
            },
        }
        with open(stage.path("index.json"), "w", encoding="utf-8") as fh:
            json.dump(index, fh, indent=2, sort_keys=True)
            fh.write("\n")
        published = stage.publish()
    except BaseException:
        stage.discard()
        raise
    if partial is not None:
        print("report: %s" % partial, file=sys.stderr)
        return 2
    print("report: %d artifacts -> %s" % (len(published), out))
    return 0


def cmd_serve_check(config: RunConfig) -> int:
    kind, endpoint = parse_scorer(config.scorer)
    if kind != "external":
        raise UsageError("serve-check needs --scorer external=ADDR")
    try:
        alive = ping_external(endpoint)
    finally:
        close_external_channels()
    if not alive:
        print("serve-check: %s did not answer ping" % endpoint,
              file=sys.stderr)
        return 2
    print("serve-check: %s ok" % endpoint)
    return 0


def _config_doc(config: RunConfig) -> dict:
    doc = {}
    for f in fields(RunConfig):
        value = getattr(config, f.name)
        doc[f.name] = str(value) if isinstance(value, Path) else value
    return doc


# --- argument wiring --------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="key=value run file; flags override it")
    common.add_argument("--manifest", metavar="TSV")
    common.add_argument("--axis", choices=("rfl", "mfl"))
    common.add_argument("--levels", type=int, metavar="N")
    common.add_argument("--tiles-per-case", type=int, metavar="N",
                        dest="tiles_per_case")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--scorer", metavar="builtin|external=ADDR")
    common.add_argument("--epsilon", type=float, metavar="F")
    common.add_argument("--jobs", type=int, metavar="N")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--epochs", type=int, metavar="N")

    parser = _Parser(prog="lenscale",
                     description="Length-scale sensitivity studies for "
                                 "tile-based slide scoring")
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

    p = sub.add_parser("phantom", parents=[common],
                       help="generate a synthetic dataset with known scales")
    p.add_argument("--cases-per-class", type=int, dest="cases_per_class")
    p.add_argument("--micro-period", type=float, dest="micro_period")
    p.add_argument("--macro-scale", type=float, dest="macro_scale")
    p.add_argument("--color-shift", type=float, dest="color_shift")
    p.add_argument("--tissue-fraction", type=float, dest="tissue_fraction")
    p.add_argument("--slide-px", type=int, dest="slide_px")
    p.add_argument("--pitch", type=float)

    sub.add_parser("tile", parents=[common],
                   help="sample tiles and write their index")
    sub.add_parser("sweep", parents=[common],
                   help="accuracy sweep over one length axis")

    p = sub.add_parser("fit", parents=[common],
                       help="two-segment fit of a finished sweep")
    p.add_argument("--sweep-dir", metavar="DIR", dest="sweep_dir")

    p = sub.add_parser("slopemap", parents=[common],
                       help="per-tile sensitivity maps and overlays")
    p.add_argument("--case", metavar="ID")

    p = sub.add_parser("report", parents=[common],
                       help="sweep + fit + maps with an artifact index")
    p.add_argument("--case", metavar="ID")

    sub.add_parser("serve-check", parents=[common],
                   help="ping an external scorer endpoint")
    return parser


_HANDLERS = {
    "phantom": cmd_phantom,
    "tile": cmd_tile,
    "sweep": cmd_sweep,
    "fit": cmd_fit,
    "slopemap": cmd_slopemap,
    "report": cmd_report,
    "serve-check": cmd_serve_check,
}

# a bad request (exit 1) versus a sound request that failed mid-run (exit 2)
_VALIDATION_ERRORS = (InvalidSpec, CohortTooSmall, InsufficientPoints,
                      DegenerateX, GridTooSmall, MissingFile,
                      MalformedManifest)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.subcommand is None:
            parser.print_help()
            return 1
        config = resolve_config(args)
        return _HANDLERS[args.subcommand](config)
    except UsageError as exc:
        print("lenscale: %s" % exc, file=sys.stderr)
        return 1
    except _VALIDATION_ERRORS as exc:
        print("lenscale: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return 1
    except LenscaleError as exc:
        print("lenscale: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return 2
    except OSError as exc:
        print("lenscale: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
