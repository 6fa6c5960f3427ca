"""Augmented contrastive meta-learning for cross-subject activity recognition.

Sub-modules:

- ``data``: windows, domain datasets, parameter sets
- ``augment``: the six sensor augmentations and view generation
- ``encoder``: channel-independent patch transformer
- ``heads``: projection / classification heads and losses
- ``meta``: bi-level meta-optimization and the ERM baseline loop
- ``ingest``: dataset I/O, grouping, LODO splits, synthetic data
- ``experiment`` / ``cli``: experiment orchestration
"""

from .augment import AugmentationConfig
from .data import DomainDataset, LabeledSample, ParameterSet, ShapeSpec, TimeSeriesWindow
from .encoder import EncoderConfig
from .heads import HeadsConfig
from .meta import MetaConfig
from .model import Model

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig",
    "DomainDataset",
    "EncoderConfig",
    "HeadsConfig",
    "LabeledSample",
    "MetaConfig",
    "Model",
    "ParameterSet",
    "ShapeSpec",
    "TimeSeriesWindow",
]
