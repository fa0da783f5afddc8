"""Non-neural machinery for open-world corner-case detection: box losses,
bipartite matching, pseudo-label generation and merging, class-agnostic
evaluation, and a synthetic-scene test bed."""

from .geometry import BBox, area, enclosing_box, giou, iou

__version__ = "0.1.0"

__all__ = ["BBox", "area", "enclosing_box", "giou", "iou", "__version__"]
