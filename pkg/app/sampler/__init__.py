# Sampler Package
from .patches import PatchDistribution, patch_distribution, sample_patch_centers, uniform_distribution
from .slides import BENIGN, MALIGN, SlideSelectionState, benign_slide_distribution, next_slide
from .buffer import ShuffleBuffer, buffer_pop_batch, buffer_push

__all__ = [
    "BENIGN",
    "MALIGN",
    "PatchDistribution",
    "ShuffleBuffer",
    "SlideSelectionState",
    "benign_slide_distribution",
    "buffer_pop_batch",
    "buffer_push",
    "next_slide",
    "patch_distribution",
    "sample_patch_centers",
    "uniform_distribution",
]
