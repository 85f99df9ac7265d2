"""voxeldiff: desk-scale 3-D generation from posed 2-D images.

Diffusion over feature voxel grids supervised purely by differentiable
emission-absorption rendering, a jointly trained 2-D super-resolution
diffusion stage, and a robust top-k patch-remix distillation that fuses
inconsistent super-resolved views into one high-resolution radiance
field.  Everything runs on a from-scratch float64 autodiff engine with
compiled interpolation kernels (numpy fallback included).
"""

__version__ = "0.1.0"

from .errors import FormatError, NumericalError, ValidationError
from .tensor import Tensor, no_grad, set_debug_checks

__all__ = [
    "__version__",
    "Tensor",
    "no_grad",
    "set_debug_checks",
    "ValidationError",
    "NumericalError",
    "FormatError",
]
