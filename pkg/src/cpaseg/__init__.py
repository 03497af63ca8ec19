"""Contextual pyramid attention for building segmentation, on a small numpy autodiff engine."""

import logging

logging.getLogger(__name__).addHandler(logging.NullHandler())

__version__ = "0.1.0"
