"""Randomized-smoothing certification with test-time batch-norm adaptation, in numpy."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # source checkout without install
    __version__ = "0.1.0"
