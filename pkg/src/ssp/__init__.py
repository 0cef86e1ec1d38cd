"""Semantic similarity propagation for temporally stable video segmentation.

Per-frame logits are aligned to the current frame with a global homography and
blended with the current estimate using per-pixel weights predicted from
feature similarity. Everything runs on numpy arrays in channel-height-width
layout.
"""

from ssp.errors import ContractError, DegenerateError, FormatError, ShapeError

__version__ = "0.1.0"

__all__ = ["ContractError", "DegenerateError", "FormatError", "ShapeError", "__version__"]
