"""Frame-field guided polygonization of building segmentation rasters."""

from .field_algebra import Frame, FrameCoeffs, coeffs_from_frame, eval_poly, frame_from_coeffs
from .field_synthesis import FrameFieldGrid, LossConfig, synthesize_frame_field
from .polygonize import BuildingSet, ScoredPolygon, SimplifyConfig
from .raster import Polygon, RasterGrid, Scene, TangentField, read_ffpr, write_ffpr
from .scenegen import SceneSpec, TemplateSpec, generate
from .skeletonize import SkeletonGraph

__version__ = "0.1.0"

__all__ = [
    "Frame", "FrameCoeffs", "coeffs_from_frame", "eval_poly", "frame_from_coeffs",
    "FrameFieldGrid", "LossConfig", "synthesize_frame_field",
    "BuildingSet", "ScoredPolygon", "SimplifyConfig",
    "Polygon", "RasterGrid", "Scene", "TangentField", "read_ffpr", "write_ffpr",
    "SceneSpec", "TemplateSpec", "generate", "SkeletonGraph",
]
