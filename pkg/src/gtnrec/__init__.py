"""Graph convolution + transformer encoder rating prediction, built on a small autodiff core."""

__version__ = "0.1.0"
