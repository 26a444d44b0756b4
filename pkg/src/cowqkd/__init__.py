"""Multichannel coherent-one-way QKD: simulator, time-tag codec, stream merger and key evaluator."""

from . import analysis, cowsim, keyeval, streams, ttrecords
from .errors import CowQkdError

__all__ = ["analysis", "cowsim", "keyeval", "streams", "ttrecords", "CowQkdError"]
__version__ = "0.1.0"
