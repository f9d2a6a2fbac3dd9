"""Scale-variant attention network for small-object segmentation."""

__version__ = "0.1.0"
