"""splatprobe: score visual features by how well a small readout network
turns them into renderable 3D Gaussian scenes.

Pipeline: per-pixel feature maps -> 2-layer MLP readout -> Gaussian cloud ->
differentiable splatting -> photometric optimization with joint camera
refinement -> masked novel-view metrics and rank/correlation reports.
"""

__version__ = "0.1.0"

from splatprobe.errors import (
    AlignmentError,
    DataError,
    FormatError,
    NumericalError,
    ShapeError,
    SplatProbeError,
)

__all__ = [
    "SplatProbeError",
    "DataError",
    "ShapeError",
    "FormatError",
    "AlignmentError",
    "NumericalError",
    "__version__",
]
