"""Exception types raised by the public operations.

Every error here means a caller contract was violated or an input cannot be
processed; none of them are retryable internal states.
"""

from __future__ import annotations


class LenscaleError(Exception):
    """Base class for all package errors."""


class MissingFile(LenscaleError):
    """A path named by a manifest or config does not exist."""


class MalformedManifest(LenscaleError):
    """A manifest line is syntactically or semantically invalid.

    The message names the offending line number.
    """


class UnknownLabel(LenscaleError):
    """A manifest label column is neither of the two recognized labels."""


class InvalidSpec(LenscaleError):
    """A phantom generation spec fails its own invariants."""


class DegenerateHistogram(LenscaleError):
    """A histogram has at most one populated bin; no threshold exists."""


class InsufficientTissue(LenscaleError):
    """The tile sampler exhausted its attempt budget before placing n tiles."""


class NoStainSignal(LenscaleError):
    """A tile is near-white everywhere; no stain basis can be estimated."""


class InvalidFactor(LenscaleError):
    """Downsampling factor outside the supported range."""


class InvalidCrop(LenscaleError):
    """Crop size outside the supported range."""


class SingleClassData(LenscaleError):
    """Training data contains only one label."""


class ExternalUnavailable(LenscaleError):
    """An external scorer endpoint cannot be reached or broke protocol."""


class UnknownModel(LenscaleError):
    """A model handle does not refer to any registered model."""


class EmptyEvaluation(LenscaleError):
    """An evaluation was requested over zero tiles."""


class CohortTooSmall(LenscaleError):
    """Too few cases per class to build disjoint cross-validation folds."""


class PartialSweep(LenscaleError):
    """A sweep finished with at least one failed level.

    The completed portion is attached as ``result``; failed levels carry
    their error message in the result's level records.
    """

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


class DegenerateX(LenscaleError):
    """All x values coincide; no line fit is defined."""


class InsufficientPoints(LenscaleError):
    """Too few points for the requested fit."""


class LadderModelMismatch(LenscaleError):
    """A slope map was requested with models that do not cover its ladder."""


class GridTooSmall(LenscaleError):
    """Slope-map grid has no tile fully inside the slide."""
