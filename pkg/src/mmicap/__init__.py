"""Fashion-feedback captioning with mutual-information decoding, built on a small numpy autodiff."""

from ._kernels import backend

__version__ = "0.1.0"
__all__ = ["backend", "__version__"]
