"""qforge: a self-contained deep Q-learning engine.

Numpy-backed tensors with reverse-mode differentiation, convolutional and
gated-transformer Q-networks, replay buffers, built-in arcade
environments, and a training/evaluation CLI.
"""

__version__ = "0.1.0"

from .tensor import Tensor  # noqa: F401
