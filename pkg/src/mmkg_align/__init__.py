"""Multi-modal knowledge-graph entity alignment.

Trains per-modality entity encoders (graph attention over the merged
edge list, affine maps for relation/attribute/name/visual features) with
a symmetric contrastive objective, distills the fused alignment
distribution back into each modality, and retrieves counterparts by
cosine ranking. Everything runs on the small reverse-mode autodiff core
in mmkg_align.tensor.
"""

__version__ = "0.1.0"
