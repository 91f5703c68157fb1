"""Likelihood-ratio out-of-distribution segmentation over dense feature maps."""

from .datamodel import (
    IGNORE,
    BinaryOutlierMap,
    FeatureMap,
    LabelMap,
    ModelBundle,
    ScoreMap,
)
from .gmm import GmmHead, SinkhornPlan, fit_gmm, gmm_log_density, sinkhorn_assign
from .inlier import InlierConfig, InlierModel, id_score, inlier_predict, train_inlier
from .uem import LlrConfig, UemModel, llr_score, ood_score, train_uem
from .metrics import ScoredPixels, auroc, average_precision, fpr_at_tpr, miou
from .inference import TilePlan, score_image, tile_plan

__all__ = [
    "IGNORE",
    "BinaryOutlierMap",
    "FeatureMap",
    "LabelMap",
    "ModelBundle",
    "ScoreMap",
    "GmmHead",
    "SinkhornPlan",
    "fit_gmm",
    "gmm_log_density",
    "sinkhorn_assign",
    "InlierConfig",
    "InlierModel",
    "id_score",
    "inlier_predict",
    "train_inlier",
    "LlrConfig",
    "UemModel",
    "llr_score",
    "ood_score",
    "train_uem",
    "ScoredPixels",
    "auroc",
    "average_precision",
    "fpr_at_tpr",
    "miou",
    "TilePlan",
    "score_image",
    "tile_plan",
]

__version__ = "0.1.0"
