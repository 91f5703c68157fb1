"""Sliding-window scoring with overlap stitching.

Tiles cover every pixel; overlapping pixels are averaged by visit count,
which for the pixel-wise heads here makes stitched output equal direct
whole-image scoring.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import FeatureMap, ModelBundle, ScoreMap
from .errors import DimMismatch, LlrsegError
from .inlier import inlier_from_bundle, max_inlier_logit
from .uem import llr_score, ood_score, uem_forward, uem_from_bundle
from .inlier import id_score as inlier_id_score


@dataclass(frozen=True)
class TilePlan:
    window: tuple   # (h, w)
    stride: tuple   # (sh, sw)
    origins: list   # [(y, x)] row-major sorted

    def tile_count(self) -> int:
        return len(self.origins)


def _axis_origins(dim: int, win: int, stride: int) -> list[int]:
    if stride < 1:
        raise LlrsegError("stride must be >= 1")
    if win >= dim:
        return [0]
    starts = list(range(0, dim - win + 1, stride))
    if starts[-1] != dim - win:
        starts.append(dim - win)  # clamp last tile to the border
    return starts


def tile_plan(height: int, width: int, window, stride) -> TilePlan:
    """Row-major tile origins covering every pixel; windows larger than the
    image clamp to it."""
    wh, ww = (window, window) if np.isscalar(window) else window
    sh, sw = (stride, stride) if np.isscalar(stride) else stride
    wh, ww = min(wh, height), min(ww, width)
    ys = _axis_origins(height, wh, sh)
    xs = _axis_origins(width, ww, sw)
    origins = [(y, x) for y in ys for x in xs]
    return TilePlan(window=(wh, ww), stride=(sh, sw), origins=origins)


SCORERS = ("llr", "id", "ood")


def _score_tile(inlier_model, uem_model, tile: FeatureMap, scorer: str) -> np.ndarray:
    if scorer == "id":
        return inlier_id_score(inlier_model, tile).scores
    log_in, log_out = uem_forward(uem_model, tile)
    if scorer == "ood":
        return ood_score(log_out).scores
    max_logit = max_inlier_logit(inlier_model, tile)
    return llr_score(log_out, log_in, max_logit).scores


def score_image(stage2: ModelBundle, f: FeatureMap, plan: TilePlan,
                scorer: str = "llr") -> ScoreMap:
    """Score all tiles and average overlaps by visit count."""
    if scorer not in SCORERS:
        raise LlrsegError(f"unknown scorer {scorer!r}, expected one of {SCORERS}")
    inlier_model = inlier_from_bundle(stage2)
    inlier_model.frozen = True
    uem_model = uem_from_bundle(stage2) if scorer != "id" else None
    h, w = f.height, f.width
    wh, ww = plan.window
    total = np.zeros((h, w))
    visits = np.zeros((h, w))
    for y, x in plan.origins:
        if y + wh > h or x + ww > w:
            raise DimMismatch(f"tile at ({y}, {x}) exceeds the {h}x{w} image")
        tile = FeatureMap(f.data[:, y:y + wh, x:x + ww])
        total[y:y + wh, x:x + ww] += _score_tile(inlier_model, uem_model, tile, scorer)
        visits[y:y + wh, x:x + ww] += 1.0
    if np.any(visits == 0):
        raise LlrsegError("tile plan does not cover every pixel")
    return ScoreMap(total / visits)
