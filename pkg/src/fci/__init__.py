"""Flow-Council-Investigator routing testbed."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, no_grad  # noqa: F401
