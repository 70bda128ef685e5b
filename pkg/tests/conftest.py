"""Shared fixtures: the expensive rendered phantoms are built once per run."""

import pytest

from lenscale.slide_io import PhantomSpec, generate_phantom, load_manifest

from oracle_utils import harvest_tiles


@pytest.fixture(scope="session")
def mini_manifest(tmp_path_factory):
    """Twelve rendered desk-size cases; enough for real end-to-end sweeps."""
    root = tmp_path_factory.mktemp("mini_phantom")
    spec = PhantomSpec(n_cases_pos=6, n_cases_neg=6, micro_period_um=4.0,
                       macro_scale_um=40.0, color_shift=0.0,
                       tissue_fraction=0.6, seed=41, slide_px=1120)
    generate_phantom(spec, root)
    return load_manifest(root / "manifest.tsv")


@pytest.fixture(scope="session")
def texture_tiles():
    """224 tiles of the colorless dual-signal phantom, both classes.

    Returns (spec, pos_tiles, neg_tiles, signed mask coverage errors).
    """
    spec = PhantomSpec(n_cases_pos=7, n_cases_neg=7, micro_period_um=4.0,
                       macro_scale_um=40.0, color_shift=0.0,
                       tissue_fraction=0.6, seed=31, slide_px=2464)
    pos, neg, errs = harvest_tiles(spec, per_case=16)
    return spec, pos, neg, errs
