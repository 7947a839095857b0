"""PCNet: encoders + CRM, batched over (image, text) pairs, and the training objective."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .crm import ConditionalReferringModule, StageState, conditional_cues, zero_residual_branches_
from .cues import decompose_rules, standardize_cues
from .encoding import EncoderConfig, Encoders, Vocabulary, build_encoders, images_to_tensor, init_uniform_
from .errors import InvalidInputError
from .losses import alignment_scores, ambiguity, cls_loss, iad_terms, index_vector, ras_loss, total_loss
from .proposals import ProposalSet, upsample


class PCNet(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig, vocab: Vocabulary, n_stages: int = 3, k: int = 5,
                 share_stages: bool = False, dtype=torch.float64, zero_init_residual: bool = True,
                 similarity: str = "cosine", score_bias: float = 0.0):
        super().__init__()
        if n_stages < 1 or k < 1:
            raise InvalidInputError("n_stages and k must be >= 1")
        self.enc_cfg = enc_cfg
        self.k = k
        self.n_stages = n_stages
        self.encoders = build_encoders(enc_cfg, vocab, dtype)
        self.crm = ConditionalReferringModule(enc_cfg.c, n_stages, share_stages, similarity)
        gen = torch.Generator().manual_seed(enc_cfg.seed + 1)
        init_uniform_(self.crm, gen)
        if zero_init_residual:
            zero_residual_branches_(self.crm)
        self.crm.to(dtype)
        # learned offset on the classification logits; carries the 1:(B-1) match prior
        self.score_bias = nn.Parameter(torch.tensor(float(score_bias), dtype=dtype))
        self.cue_table: dict[str, list[str]] = {}

    @property
    def dtype(self) -> torch.dtype:
        return self.crm.stages[0].t2t.w_query.weight.dtype

    @property
    def grid(self) -> tuple[int, int]:
        return (self.enc_cfg.grid, self.enc_cfg.grid)

    def cues_for(self, text: str) -> list[str]:
        """Standardized cue phrases; externally supplied ones (e.g. from an LLM) take precedence."""
        phrases = self.cue_table.get(text)
        if phrases is None:
            phrases = standardize_cues(decompose_rules(text), self.k).phrases
            self.cue_table[text] = phrases
        elif len(phrases) != self.k:
            raise InvalidInputError(f"cue table entry for {text!r} has {len(phrases)} phrases, expected {self.k}")
        return phrases

    def embed_texts(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """(T, C) global embeddings and (T, K, C) cue embeddings."""
        flat = [c for t in texts for c in self.cues_for(t)]
        emb = self.encoders.encode_texts(list(texts) + flat)
        q0 = emb[:len(texts)]
        cues = emb[len(texts):].view(len(texts), self.k, -1)
        return q0, cues

    def encode_images(self, images) -> torch.Tensor:
        if not torch.is_tensor(images):
            images = images_to_tensor(images, self.dtype)
        return self.encoders.encode_images(images.to(self.dtype))

    def run_pairs(self, visual0: torch.Tensor, q0: torch.Tensor, cue_emb: torch.Tensor,
                  img_idx: Sequence[int], txt_idx: Sequence[int],
                  neg_idx: Sequence[Sequence[int]]) -> list[StageState]:
        return run_pairs(self.crm, visual0, q0, cue_emb, img_idx, txt_idx, neg_idx, self.grid)


def run_pairs(crm: ConditionalReferringModule, visual0: torch.Tensor, q0: torch.Tensor,
              cue_emb: torch.Tensor, img_idx: Sequence[int], txt_idx: Sequence[int],
              neg_idx: Sequence[Sequence[int]], grid: tuple[int, int]) -> list[StageState]:
    img = torch.as_tensor(list(img_idx), dtype=torch.long)
    txt = torch.as_tensor(list(txt_idx), dtype=torch.long)
    cues = conditional_cues(cue_emb, list(txt_idx), neg_idx)
    return crm(visual0[img], q0[txt], cues, grid)


# --- batch objective ----------------------------------------------------------

def pair_layout(b: int, partners: Sequence[tuple[int, int]]):
    """Index lists for all B*B (image, text) pairs followed by the IaD partner pairs.

    Pair ``i * b + j`` is image i with text j. ``partners`` holds (image, text)
    with text indices into the extended text list. Negatives for text j are
    the cues of every other batch text; for a partner on image a, every batch
    text except a's own positive.
    """
    img, txt, neg = [], [], []
    for i in range(b):
        for j in range(b):
            img.append(i)
            txt.append(j)
            neg.append([k for k in range(b) if k != j])
    for a, t in partners:
        img.append(a)
        txt.append(t)
        neg.append([k for k in range(b) if k != a])
    return img, txt, neg


@dataclass
class Selections:
    """Discrete choices made by the objective; pass back in to hold them fixed."""
    fg_index: torch.Tensor          # (B, N)
    ref_a: torch.Tensor | None      # (M, N, P) score references for IaD anchors
    ref_d: torch.Tensor | None      # (M, N, P) score references for IaD partners


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    ras: torch.Tensor
    iad: torch.Tensor
    total: torch.Tensor
    cls_per_stage: torch.Tensor = field(repr=False)
    ambiguity: torch.Tensor | None = field(default=None, repr=False)  # (B, N)

    def as_log(self, step: int) -> dict:
        return {"step": int(step), "cls": self.cls.item(), "ras": self.ras.item(),
                "iad": self.iad.item(), "total": self.total.item()}


def batch_objective(states: list[StageState], b: int, partner_anchor: Sequence[int],
                    masks: torch.Tensor, valid: torch.Tensor, image_size: tuple[int, int],
                    use_ras: bool = True, use_iad: bool = True,
                    frozen: Selections | None = None,
                    pooling: str = "logit", score_scale: float = 1.0,
                    score_bias: torch.Tensor | float = 0.0) -> tuple[LossBreakdown, Selections]:
    """Losses for one batch laid out by :func:`pair_layout`.

    Args:
        states: per-stage outputs for B*B + M pairs.
        partner_anchor: for each of the M partner pairs, the batch index of its image.
        masks: (B, P, H, W) proposals per batch image; valid: (B, P).
        pooling: "logit" pools the pre-ReLU similarity, "relu" the ReLU map.
            Both give the same score whenever it is positive; the ReLU version has
            no gradient once a whole map goes non-positive.
        score_scale: multiplies the pooled scores before the sigmoid; cosine
            scores live in [-1, 1] and need a scale to reach confident logits.
        score_bias: added after scaling. Only one pair in B is a match, and
            without an offset the cheapest fit of that prior is to push every
            cell away from every text, which leaves no response to localize.
    """
    n_stages = len(states)
    m = len(partner_anchor)
    if pooling not in ("logit", "relu"):
        raise InvalidInputError(f"unknown pooling {pooling!r}")
    source = torch.stack([s.logits if pooling == "logit" else s.relu for s in states], dim=1)
    resp = torch.stack([s.response for s in states], dim=1)
    pooled = score_scale * source[: b * b].amax(dim=(-2, -1)) + score_bias  # (B*B, N)
    cls_stages = torch.stack([cls_loss(pooled[:, n].view(b, b)) for n in range(n_stages)])
    cls = cls_stages.mean()
    zero = cls * 0.0
    ras, iad, amb = zero, zero, None
    fg_index = frozen.fg_index if frozen is not None else None
    ref_a = ref_d = None
    need_scores = use_ras or (use_iad and m > 0)
    if need_scores:
        diag = torch.arange(b) * (b + 1)
        r_diag = upsample(resp[diag], image_size)              # (B, N, H, W)
        mk = masks[:, None]                                     # (B, 1, P, H, W)
        vd = valid[:, None, :].expand(b, n_stages, -1)
        al = alignment_scores(r_diag, mk, vd, fg_index)
        fg_index = al.fg_index
        if use_ras:
            amb = ambiguity(r_diag, al.fg_mask, al.bg_mask)     # (B, N)
            ras = ras_loss(amb).mean()
        if use_iad and m > 0:
            anchor = torch.as_tensor(list(partner_anchor), dtype=torch.long)
            r_part = upsample(resp[b * b:], image_size)        # (M, N, H, W)
            vp = valid[anchor][:, None, :].expand(m, n_stages, -1)
            s_d = alignment_scores(r_part, masks[anchor][:, None], vp).scores
            s_a = al.scores[anchor]
            ref_a = frozen.ref_a if frozen is not None else None
            ref_d = frozen.ref_d if frozen is not None else None
            y_a = index_vector(s_a, vp, ref_a)
            y_d = index_vector(s_d, vp, ref_d)
            ref_a = s_a.detach() if ref_a is None else ref_a
            ref_d = s_d.detach() if ref_d is None else ref_d
            per_pair = iad_terms(y_a, y_d).mean(dim=1)          # average over stages
            # mean over each anchor's partners, then over anchors that have partners
            sums = torch.zeros(b, dtype=per_pair.dtype).index_add(0, anchor, per_pair)
            counts = torch.zeros(b, dtype=per_pair.dtype).index_add(0, anchor, torch.ones_like(per_pair))
            has = counts > 0
            iad = (sums[has] / counts[has]).mean()
    total = total_loss(cls, ras, iad)
    if fg_index is None:
        fg_index = torch.zeros(b, n_stages, dtype=torch.long)
    return (LossBreakdown(cls, ras, iad, total, cls_stages.detach(), amb),
            Selections(fg_index, ref_a, ref_d))


def proposal_tensors(proposals: Sequence[ProposalSet], dtype=torch.float64):
    masks = torch.as_tensor(np.stack([p.masks for p in proposals]), dtype=dtype)
    valid = torch.as_tensor(np.stack([p.valid for p in proposals]))
    return masks, valid
