"""Building blocks for small-object detection research.

Subpackages map to the pieces of the method: ``tensor`` (dense NCHW
substrate), ``diffconv`` (edge-enhanced convolution and fusion), ``spd``
(space-to-depth), ``csdmam`` (dual-domain attention), ``loss``
(Focaler-Wise-SIoU), ``metrics`` (COCO evaluation) and ``synthgen``
(synthetic scenes).
"""
__version__ = "0.1.0"

from . import backend  # noqa: F401  (selects kernels at import)
