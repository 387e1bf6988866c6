"""Structure-coherent single-image super-resolution GAN, built from scratch."""

__version__ = "0.1.0"

from .autodiff import Tensor, no_grad

__all__ = ["Tensor", "no_grad", "__version__"]
