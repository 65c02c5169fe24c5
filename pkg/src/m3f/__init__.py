"""M3F: multi-modal few-shot learning framework at desk scale."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, backward  # noqa: F401
