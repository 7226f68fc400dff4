"""maskscope: mask-classification anomaly segmentation at desk scale.

Scoring, losses, open-set inference and evaluation metrics operating on
explicit tensors, with slow reference oracles alongside.
"""
from .attention import (
    AttentionMaskPair,
    AttentionWeights,
    attend,
    attention_backward,
    attention_forward,
)
from .components import connected_components
from .decoder import MaskDecoderEstimator, ToyDecoder
from .io import load_labelmap, load_tensor, save_labelmap, save_tensor
from .matching import hungarian_assign
from .metrics import auprc, component_metrics, fpr_at_95tpr, open_iou, panoptic_quality
from .openset import OpenSetSegmenter, ops_inference, oss_inference
from .outliermix import anomaly_mix, sample_batch
from .scoring import MaskAnomalyScorer, mask_anomaly_score, refinement_mask
from .structures import PanopticMap, Prediction, Taxonomy

__version__ = "0.1.0"

__all__ = [
    "AttentionMaskPair",
    "AttentionWeights",
    "MaskAnomalyScorer",
    "MaskDecoderEstimator",
    "OpenSetSegmenter",
    "PanopticMap",
    "Prediction",
    "Taxonomy",
    "ToyDecoder",
    "anomaly_mix",
    "attend",
    "attention_backward",
    "attention_forward",
    "auprc",
    "component_metrics",
    "connected_components",
    "fpr_at_95tpr",
    "hungarian_assign",
    "load_labelmap",
    "load_tensor",
    "mask_anomaly_score",
    "open_iou",
    "ops_inference",
    "oss_inference",
    "panoptic_quality",
    "refinement_mask",
    "sample_batch",
    "save_labelmap",
    "save_tensor",
]
