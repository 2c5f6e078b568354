"""Occlusion-aware CG compositing for monocular equirectangular sequences."""

from .compositor import BlendConfig, CgLayer
from .config import PipelineConfig
from .depth import DepthMap, DivergenceSearchRegion, ProbabilityMap
from .flow import FlowField, FlowParams
from .semantics import Category, Label, SemanticMap, VisibilityParams
from .sphere import AngularPoint, CameraPose, SphericalFrame

__version__ = "0.1.0"

__all__ = [
    "AngularPoint",
    "BlendConfig",
    "CameraPose",
    "Category",
    "CgLayer",
    "DepthMap",
    "DivergenceSearchRegion",
    "FlowField",
    "FlowParams",
    "Label",
    "PipelineConfig",
    "ProbabilityMap",
    "SemanticMap",
    "SphericalFrame",
    "VisibilityParams",
    "__version__",
]
