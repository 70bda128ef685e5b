"""Length-scale sensitivity analysis for tile-based slide classifiers.

The package measures how a binary tile classifier's accuracy depends on two
physical length scales of its input: the finest resolvable feature length
(set by downsampling) and the largest visible feature length (set by center
cropping), locates the characteristic scale where accuracy bends, and maps
which tiles drive that sensitivity.
"""

__version__ = "0.1.0"

from .errors import (
    CohortTooSmall,
    DegenerateHistogram,
    DegenerateX,
    EmptyEvaluation,
    ExternalUnavailable,
    GridTooSmall,
    InsufficientPoints,
    InsufficientTissue,
    InvalidCrop,
    InvalidFactor,
    InvalidSpec,
    LadderModelMismatch,
    MalformedManifest,
    MissingFile,
    NoStainSignal,
    PartialSweep,
    SingleClassData,
    UnknownLabel,
    UnknownModel,
)

__all__ = [
    "__version__",
    "CohortTooSmall",
    "DegenerateHistogram",
    "DegenerateX",
    "EmptyEvaluation",
    "ExternalUnavailable",
    "GridTooSmall",
    "InsufficientPoints",
    "InsufficientTissue",
    "InvalidCrop",
    "InvalidFactor",
    "InvalidSpec",
    "LadderModelMismatch",
    "MalformedManifest",
    "MissingFile",
    "NoStainSignal",
    "PartialSweep",
    "SingleClassData",
    "UnknownLabel",
    "UnknownModel",
]
