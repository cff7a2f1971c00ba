"""Semi-supervised segmentation with an open-vocabulary teacher for out-of-distribution images."""

__version__ = "0.1.0"
