"""Mixed-curvature temporal knowledge-graph modelling with maximum-entropy scores."""

from .config import DomainBounds, FeatureConfig, TrainConfig
from .errors import GeoTKGError
from .graphstore import TemporalKG, load_tsv, save_tsv
from .trainer import ModelParams, TrainTrace, train

__version__ = "0.1.0"

__all__ = [
    "DomainBounds",
    "FeatureConfig",
    "GeoTKGError",
    "ModelParams",
    "TemporalKG",
    "TrainConfig",
    "TrainTrace",
    "load_tsv",
    "save_tsv",
    "train",
]
