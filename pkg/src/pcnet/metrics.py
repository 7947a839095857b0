"""Localization and segmentation metrics: PointM, mIoU/oIoU, proposal selection, Oracle."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .errors import DegenerateInputError, InvalidInputError
from .losses import proposal_scores
from .proposals import ProposalSet, binary_iou, upsample


class Peak(NamedTuple):
    row: int
    col: int
    degenerate: bool


@dataclass
class EvalRecord:
    sample_id: str
    peak: tuple[int, int]
    point_hit: bool
    pred_mask: np.ndarray | None = None
    iou: float = 0.0
    oracle_iou: float = 0.0


def _as_map(response) -> torch.Tensor:
    t = torch.as_tensor(response)
    if t.dim() != 2 or t.numel() == 0:
        raise InvalidInputError("response map must be a non-empty 2-D grid")
    return t.to(torch.float64)


def peak_point(response, image_size: tuple[int, int]) -> Peak:
    """Argmax of the bilinearly upsampled map; first in row-major order on ties.

    An all-zero map has no peak: (0, 0) is returned with ``degenerate`` set.
    """
    r = _as_map(response)
    if not bool((r > 0).any()):
        return Peak(0, 0, True)
    up = upsample(r, tuple(image_size))
    flat = int(torch.argmax(up.reshape(-1)))
    return Peak(flat // up.shape[1], flat % up.shape[1], False)


def point_hit(peak: Peak, gt_mask: np.ndarray) -> bool:
    return (not peak.degenerate) and bool(np.asarray(gt_mask)[peak.row, peak.col])


def pointm(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise InvalidInputError("no records")
    return float(np.mean([bool(r.point_hit) for r in records]))


def miou_oiou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> tuple[float, float]:
    if len(preds) != len(gts):
        raise InvalidInputError("prediction and ground-truth lists differ in length")
    if not preds:
        raise InvalidInputError("no masks")
    ious, inter_total, union_total = [], 0, 0
    for p, g in zip(preds, gts):
        p = np.asarray(p, dtype=bool)
        g = np.asarray(g, dtype=bool)
        if p.shape != g.shape:
            raise InvalidInputError("mask pair with different resolutions")
        inter = int(np.logical_and(p, g).sum())
        union = int(np.logical_or(p, g).sum())
        ious.append(inter / union if union else 0.0)
        inter_total += inter
        union_total += union
    return float(np.mean(ious)), (inter_total / union_total if union_total else 0.0)


def select_index(response, proposals: ProposalSet) -> int:
    if proposals.n_valid == 0:
        raise DegenerateInputError("no valid proposals")
    r = upsample(_as_map(response), proposals.shape)
    scores = proposal_scores(r, proposals.as_tensor(r.dtype), torch.as_tensor(proposals.valid))
    scores = scores.masked_fill(~torch.as_tensor(proposals.valid), -float("inf"))
    return int(torch.argmax(scores))


def select_mask(response, proposals: ProposalSet) -> np.ndarray:
    """Valid proposal with the highest alignment score (lowest index on ties)."""
    return proposals.masks[select_index(response, proposals)].copy()


def oracle_eval(proposals: ProposalSet, gt_mask: np.ndarray) -> float:
    ious = [binary_iou(m, gt_mask) for m, ok in zip(proposals.masks, proposals.valid) if ok]
    return max(ious, default=0.0)


def random_peak_baseline(gt_masks: Sequence[np.ndarray]) -> float:
    """Expected PointM of a uniformly random peak: mean GT area fraction."""
    return float(np.mean([np.asarray(m, dtype=bool).mean() for m in gt_masks]))
