"""Inverse rendering of reflective objects with 2D Gaussian surfels."""

from .scene import (
    ActivatedSplats,
    Camera,
    GBuffer,
    GradientSet,
    RawSplatParams,
    SceneError,
    SplatCloud,
    SplatSurfel,
    TrainDataset,
    TrainView,
    activate,
    deactivate,
    look_at_camera,
    splat_normal,
)
from .rasterizer import (
    RasterSettings,
    RenderOutput,
    SplatFragment,
    rasterize,
    rasterize_backward,
    ray_splat_intersect,
    splat_weight,
)
from .shading import (
    BrdfLut,
    EnvironmentLight,
    ShadingSample,
    prefilter_diffuse,
    prefilter_specular,
    shade,
    shade_deferred,
)

__version__ = "0.1.0"
