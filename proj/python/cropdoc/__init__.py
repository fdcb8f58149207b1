"""Capsule-network crop disease mapping on hyperspectral scenes."""

from ._cropdoc import *  # noqa: F401,F403
from ._cropdoc import __doc__  # noqa: F401

__version__ = "0.1.0"
