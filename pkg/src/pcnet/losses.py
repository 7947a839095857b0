"""Classification, region-aware shrinking and instance-aware disambiguation losses.

Functions operate on batched tensors; leading axes are arbitrary unless noted.
Discrete choices (foreground proposal, argmax index) break ties toward the
lowest index and exclude padding proposals.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DegenerateInputError, InvalidInputError, NumericError
from .proposals import soft_iou

logger = logging.getLogger(__name__)


@dataclass
class AlignmentScores:
    scores: torch.Tensor     # (..., P)
    fg_index: torch.Tensor   # (...,) long
    fg_mask: torch.Tensor    # (..., H, W)
    bg_mask: torch.Tensor    # (..., H, W)


def _valid_argmax(scores: torch.Tensor, valid: torch.Tensor | None) -> torch.Tensor:
    if valid is not None:
        valid = torch.as_tensor(valid, dtype=torch.bool).expand_as(scores)
        if not valid.any(dim=-1).all():
            raise DegenerateInputError("no valid proposals")
        scores = scores.masked_fill(~valid, -math.inf)
    return scores.argmax(dim=-1)


def proposal_scores(response: torch.Tensor, masks: torch.Tensor,
                    valid: torch.Tensor | None = None) -> torch.Tensor:
    """max over pixels of R * m_p.

    Args:
        response: (..., H, W), already at mask resolution.
        masks: (..., P, H, W) binary, broadcastable against ``response[..., None, :, :]``.
    Returns:
        (..., P); padding proposals score exactly 0.
    """
    masks = torch.as_tensor(masks, dtype=response.dtype)
    if response.shape[-2:] != masks.shape[-2:]:
        raise InvalidInputError("response must be upsampled to proposal resolution first")
    scores = (response[..., None, :, :] * masks).amax(dim=(-2, -1))
    if valid is not None:
        valid = torch.as_tensor(valid, dtype=torch.bool)
        scores = torch.where(valid, scores, torch.zeros_like(scores))
    return scores


def split_foreground(masks: torch.Tensor, valid: torch.Tensor | None,
                     fg_index: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Foreground mask at ``fg_index`` and the max-union of all other valid masks."""
    masks = torch.as_tensor(masks)
    n_prop = masks.shape[-3]
    pick = F.one_hot(fg_index, n_prop).to(torch.bool)  # (..., P)
    keep = ~pick
    if valid is not None:
        keep = keep & torch.as_tensor(valid, dtype=torch.bool)
    fg = (masks * pick[..., None, None].to(masks.dtype)).amax(dim=-3)
    bg = (masks * keep[..., None, None].to(masks.dtype)).amax(dim=-3)
    return fg, bg


def alignment_scores(response: torch.Tensor, masks: torch.Tensor,
                     valid: torch.Tensor | None = None,
                     fg_index: torch.Tensor | None = None) -> AlignmentScores:
    """Score every proposal against the response and split foreground/background.

    Pass ``fg_index`` to hold the foreground choice fixed (finite-difference checks).
    """
    scores = proposal_scores(response, masks, valid)
    if fg_index is None:
        fg_index = _valid_argmax(scores.detach(), valid)
    masks = torch.as_tensor(masks, dtype=response.dtype)
    fg, bg = split_foreground(masks, valid, fg_index)
    return AlignmentScores(scores, fg_index, fg, bg)


def ambiguity(response: torch.Tensor, fg_mask: torch.Tensor, bg_mask: torch.Tensor) -> torch.Tensor:
    """1 - (softIoU(R, fg) - softIoU(R, bg)), clamped to [0, 1]."""
    margin = soft_iou(response, fg_mask) - soft_iou(response, bg_mask)
    return (1.0 - margin).clamp(0.0, 1.0)


def ras_loss(ambiguities: torch.Tensor) -> torch.Tensor:
    """Mean hinge on stage-to-stage ambiguity increases; last axis is the stage axis."""
    ambiguities = torch.as_tensor(ambiguities)
    n = ambiguities.shape[-1]
    if n < 2:
        logger.warning("region-aware shrinking needs >= 2 stages; returning 0")
        return ambiguities.sum(dim=-1) * 0.0
    rises = F.relu(ambiguities[..., 1:] - ambiguities[..., :-1])
    return rises.sum(dim=-1) / (n - 1)


def index_vector(scores: torch.Tensor, valid: torch.Tensor | None = None,
                 reference: torch.Tensor | None = None) -> torch.Tensor:
    """one_hot(argmax S) + S - sg(S).

    The forward value is the one-hot; gradients pass to ``scores`` unchanged.
    ``reference`` replaces sg(S) (and the argmax source) with a fixed tensor,
    which turns the estimator into an ordinary differentiable function of S.
    """
    ref = scores.detach() if reference is None else reference
    idx = _valid_argmax(ref, valid)
    hot = F.one_hot(idx, scores.shape[-1]).to(scores.dtype)
    return hot + (scores - ref)  # the bracket is exactly zero in the forward pass


def iad_terms(y_a: torch.Tensor, y_d: torch.Tensor) -> torch.Tensor:
    """1 - ||y_a - y_d||^2 over the last axis."""
    return 1.0 - ((y_a - y_d) ** 2).sum(dim=-1)


def iad_loss(y_a: torch.Tensor, y_ds: torch.Tensor) -> torch.Tensor:
    """Mean pair term over the N_d partners; ``y_ds`` is (N_d, P). Zero when N_d == 0."""
    y_ds = torch.as_tensor(y_ds)
    if y_ds.shape[0] == 0:
        return y_a.sum() * 0.0
    if y_ds.shape[-1] != y_a.shape[-1]:
        raise InvalidInputError("index vectors must have the same length")
    return iad_terms(y_a[None, :], y_ds).mean()


def cls_loss(y: torch.Tensor) -> torch.Tensor:
    """Sigmoid cross-entropy with positives on the diagonal, averaged over all B*B entries."""
    if y.dim() != 2 or y.shape[0] != y.shape[1]:
        raise InvalidInputError(f"score matrix must be square, got {tuple(y.shape)}")
    eye = torch.eye(y.shape[0], dtype=torch.bool)
    per_entry = torch.where(eye, F.logsigmoid(y), F.logsigmoid(-y))
    return -per_entry.mean()


def total_loss(cls: torch.Tensor, ras: torch.Tensor, iad: torch.Tensor) -> torch.Tensor:
    for name, value in (("cls", cls), ("ras", ras), ("iad", iad)):
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NumericError(f"{name} loss is not finite")
    return cls + ras + iad
