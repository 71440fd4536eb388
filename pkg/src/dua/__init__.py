"""Personalized model merging for continual learning with user-side importance priors."""
from .errors import DuaError

__version__ = "0.1.0"
__all__ = ["DuaError", "__version__"]
