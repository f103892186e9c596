"""Universal language interface for vision tasks, desk scale.

Five tasks (detection, instance segmentation, semantic segmentation,
captioning, visual grounding) share one transformer through a token
interface: targets become fixed-length token sequences decoded in
parallel, grid-anchored tracks.
"""

__version__ = "0.1.0"
