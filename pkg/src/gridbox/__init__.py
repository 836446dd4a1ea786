"""
gridbox - federated mammogram grid: grid-boxes, catalogue federation and the mgctl client
"""

__version__ = "0.1.0"

from .core import GridBox
from .errors import GridError

__all__ = ["GridBox", "GridError"]
