"""Conditional Referring Module: multi-stage cue-conditioned refinement.

Each stage takes the referring embedding ``Q_n``, the visual grid ``V_n`` and a
conditional cue batch (the positive cue in row 0, negative cues from other
images below it) and produces ``Q_{n+1}``, ``V_{n+1}`` and a response map.

All tensors carry a leading "pair" axis so many (image, text) combinations
run in one call:

    cues    (P, L+1, C)
    visual  (P, H*W, C)
    q       (P, C)
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .errors import InvalidInputError, NumericError

EPS = 1e-12


class MLP(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class VisionToText(nn.Module):
    """Cue rows attend over grid positions; residual on the cue rows."""

    def __init__(self, dim: int):
        super().__init__()
        self.w_query = nn.Linear(dim, dim, bias=False)
        self.w_key = nn.Linear(dim, dim, bias=False)
        self.w_value = nn.Linear(dim, dim, bias=False)
        self.mlp = MLP(dim)

    def forward(self, cues: torch.Tensor, visual: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        scale = math.sqrt(cues.shape[-1])
        logits = self.w_query(cues) @ self.w_key(visual).transpose(-1, -2) / scale
        attn = logits.softmax(dim=-1)  # (P, L+1, HW)
        return self.mlp(attn @ self.w_value(visual)) + cues, attn


class TextToText(nn.Module):
    """The referring embedding attends over the vision-attended cue rows."""

    def __init__(self, dim: int):
        super().__init__()
        self.w_query = nn.Linear(dim, dim, bias=False)
        self.w_key = nn.Linear(dim, dim, bias=False)
        self.w_value = nn.Linear(dim, dim, bias=False)
        self.mlp = MLP(dim)

    def forward(self, q: torch.Tensor, q_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        scale = math.sqrt(q.shape[-1])
        logits = self.w_query(q)[:, None, :] @ self.w_key(q_hat).transpose(-1, -2) / scale
        attn = logits.softmax(dim=-1)  # (P, 1, L+1)
        out = self.mlp((attn @ self.w_value(q_hat))[:, 0, :]) + q
        return out, attn


class TextToVisual(nn.Module):
    """Every grid position attends to the single referring token.

    With one key the softmax weight is 1 everywhere, so the block adds the same
    query-dependent vector to all positions.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.w_value = nn.Linear(dim, dim, bias=False)
        self.mlp = MLP(dim)

    def forward(self, visual: torch.Tensor, q: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        attn = torch.ones(visual.shape[0], visual.shape[1], 1, dtype=visual.dtype)
        injected = self.mlp(attn @ self.w_value(q)[:, None, :])
        return injected + visual, attn


def normalize_map(relu_map: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Per-map min-max to [0, 1] over the last two axes; constant maps become zeros."""
    flat = relu_map.flatten(-2)
    lo = flat.amin(dim=-1, keepdim=True)
    hi = flat.amax(dim=-1, keepdim=True)
    span = hi - lo
    ok = span >= eps
    out = torch.where(ok, (flat - lo) / torch.where(ok, span, torch.ones_like(span)),
                      torch.zeros_like(flat))
    return out.view_as(relu_map)


SIMILARITIES = ("cosine", "dot")


def response_map(visual_hat: torch.Tensor, q_next: torch.Tensor, grid: tuple[int, int],
                 similarity: str = "cosine"):
    """Return (logits, relu map, normalized response), each (P, H, W).

    ``cosine`` divides each position's dot product by both feature norms, so
    logits lie in [-1, 1]; ``dot`` keeps the raw product.
    """
    logits = (visual_hat @ q_next[:, :, None])[..., 0]
    if similarity == "cosine":
        norms = visual_hat.norm(dim=-1) * q_next.norm(dim=-1, keepdim=True)
        logits = logits / norms.clamp_min(EPS)
    elif similarity != "dot":
        raise InvalidInputError(f"unknown similarity {similarity!r}")
    logits = logits.view(-1, *grid)
    relu = F.relu(logits)
    return logits, relu, normalize_map(relu)


@dataclass
class StageState:
    """Outputs of one CRM stage for a batch of pairs."""
    stage: int
    q_global: torch.Tensor   # Q_{n+1}, (P, C)
    visual: torch.Tensor     # V_{n+1}, (P, HW, C)
    logits: torch.Tensor     # pre-ReLU similarity, (P, H, W)
    relu: torch.Tensor       # (P, H, W); its spatial max is the classification score
    response: torch.Tensor   # R_n in [0, 1], (P, H, W)
    attn_vt: torch.Tensor    # (P, L+1, HW)
    attn_tt: torch.Tensor    # (P, 1, L+1)
    attn_pt: torch.Tensor    # (P, HW, 1)


class CRMStage(nn.Module):
    def __init__(self, dim: int, similarity: str = "cosine"):
        super().__init__()
        if similarity not in SIMILARITIES:
            raise InvalidInputError(f"unknown similarity {similarity!r}")
        self.similarity = similarity
        self.v2t = VisionToText(dim)
        self.t2t = TextToText(dim)
        self.t2v = TextToVisual(dim)

    def forward(self, stage: int, cues: torch.Tensor, visual: torch.Tensor, q: torch.Tensor,
                grid: tuple[int, int]) -> StageState:
        q_hat, attn_vt = self.v2t(cues, visual)
        _check(q_hat, "vision-attended cues", stage)
        q_next, attn_tt = self.t2t(q, q_hat)
        _check(q_next, "referring embedding", stage)
        v_next, attn_pt = self.t2v(visual, q_next)
        _check(v_next, "visual features", stage)
        logits, relu, resp = response_map(v_next, q_next, grid, self.similarity)
        return StageState(stage, q_next, v_next, logits, relu, resp, attn_vt, attn_tt, attn_pt)


def _check(t: torch.Tensor, what: str, stage: int) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite {what} at stage {stage}")


class ConditionalReferringModule(nn.Module):
    """N stacked stages; stage n consumes cue index n mod K."""

    def __init__(self, dim: int, n_stages: int = 3, share_stages: bool = False,
                 similarity: str = "cosine"):
        super().__init__()
        if n_stages < 1:
            raise InvalidInputError("n_stages must be >= 1")
        self.n_stages = n_stages
        self.share_stages = share_stages
        n_modules = 1 if share_stages else n_stages
        self.stages = nn.ModuleList(CRMStage(dim, similarity) for _ in range(n_modules))

    def forward(self, visual: torch.Tensor, q: torch.Tensor, cue_batches: torch.Tensor,
                grid: tuple[int, int]) -> list[StageState]:
        """
        Args:
            visual: (P, H, W, C) or (P, HW, C) initial grid ``V_0``.
            q: (P, C) global referring embedding ``Q_0``.
            cue_batches: (P, K, L+1, C); row 0 of each stage slice is the positive cue.
        """
        if visual.dim() == 4:
            visual = visual.flatten(1, 2)
        n_cues = cue_batches.shape[1]
        states = []
        for n in range(self.n_stages):
            block = self.stages[0 if self.share_stages else n]
            state = block(n, cue_batches[:, n % n_cues], visual, q, grid)
            states.append(state)
            visual, q = state.visual, state.q_global
        return states


def conditional_cues(cue_emb: torch.Tensor, positive: Sequence[int],
                     negatives: Sequence[Sequence[int]]) -> torch.Tensor:
    """Stack positive and negative cue rows per pair.

    Args:
        cue_emb: (T, K, C) cue embeddings for T texts.
        positive: per pair, index of the positive text.
        negatives: per pair, indices of the L negative texts (same L for all pairs).
    Returns:
        (P, K, L+1, C)
    """
    rows = [[p, *neg] for p, neg in zip(positive, negatives)]
    if len({len(r) for r in rows}) > 1:
        raise InvalidInputError("every pair needs the same number of negatives")
    idx = torch.tensor(rows, dtype=torch.long)  # (P, L+1)
    return cue_emb[idx].transpose(1, 2)


def zero_mlps_(module: nn.Module) -> None:
    """Zero every MLP and value projection: makes each stage an exact residual identity."""
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, MLP):
                for p in sub.parameters():
                    p.zero_()
            if isinstance(sub, (VisionToText, TextToText, TextToVisual)):
                sub.w_value.weight.zero_()


def zero_residual_branches_(module: nn.Module) -> None:
    """Zero the output layer of every MLP so each stage starts as the identity."""
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, MLP):
                sub.fc2.weight.zero_()
                sub.fc2.bias.zero_()
