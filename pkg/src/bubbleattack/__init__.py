"""Adversarial attacks on ballot bubble classifiers, with float precision diagnostics."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("bubbleattack")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402

__all__ = ["__version__", "BACKEND"]
