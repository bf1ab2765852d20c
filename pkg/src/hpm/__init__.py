"""Hierarchical part model engine: occlusion-aware face detection and landmark localization."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    NEG_INF,
    Configuration,
    ModelSpec,
    ParamVector,
    StateSpace,
    Topology,
    assemble_feature_vector,
    score_configuration,
    tie_mirror_parameters,
)
from .serialize import load_model, save_model  # noqa: F401
