"""aquarender: differentiable volume rendering of single-surface underwater scenes.

The package fits a voxel radiance field to posed images of a synthetic
participating-medium scene and renders it with either a conventional
volume renderer or a single-surface renderer that concentrates the weight
distribution around the median surface depth of each ray.
"""

from aquarender.estimator import SceneReconstructor

__version__ = "0.1.0"

__all__ = ["SceneReconstructor", "__version__"]
