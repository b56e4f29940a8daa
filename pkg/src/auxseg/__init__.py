"""Weakly supervised semantic segmentation with auxiliary tasks and cross-task affinity.

A three-headed multi-task network (classification / saliency / segmentation)
trained from image-level labels and coarse offline saliency maps. Task-specific
non-local affinities are fused into a cross-task affinity that refines dense
predictions and propagates class activation maps, driving iterative pseudo-label
updates over training stages.
"""

__version__ = "0.1.0"

IGNORE_LABEL = 255
