"""Graph convolution with static or dynamically generated filter banks."""

__version__ = "0.1.0"
