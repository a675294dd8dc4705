"""Intent-driven semantic image transmission over simulated wireless links."""

__version__ = "0.1.0"

from .channel import Channel, ChannelConfig, ChannelOutcome
from .codec import Codec, CodecConfig
from .training import TrainConfig

__all__ = [
    "Channel",
    "ChannelConfig",
    "ChannelOutcome",
    "Codec",
    "CodecConfig",
    "TrainConfig",
    "__version__",
]
