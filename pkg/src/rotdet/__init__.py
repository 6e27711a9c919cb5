"""Kernels for query-based oriented object detection.

Rotated-box geometry, a geometry-augmented query decoder, and stage-wise
and momentum bipartite matching, with a synthetic experiment harness.
"""
from ._backend import NAME as BACKEND
from .decoder import DecoderConfig, QueryState, iga_backward, iga_forward, run_decoder
from .matching import Assignment, CostWeights, GroundTruthSet, Predictions, cost_matrix, hungarian, stage_wise_match
from .mbm import MbmConfig, identity_shift_rate, momentum_match
from .rotgeom import RotatedBox, rotated_iou, rotated_roi_align

__version__ = "0.1.0"
