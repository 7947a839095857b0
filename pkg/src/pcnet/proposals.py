"""Mask proposals: RLE file format, area/IoU filtering, soft IoU, synthetic generation."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import InvalidInputError

AREA_MIN = 1000
IOU_DEDUPE = 0.8
NUM_PROPOSALS = 40


@dataclass
class ProposalSet:
    masks: np.ndarray  # (P, H, W) bool
    valid: np.ndarray  # (P,) bool; False rows are all-zero padding

    @property
    def p(self) -> int:
        return len(self.masks)

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1:]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def as_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(self.masks, dtype=dtype)


@dataclass(frozen=True)
class MaskStats:
    area: int
    bbox: tuple[int, int, int, int] | None  # (r0, c0, r1, c1), inclusive; None if empty


def mask_stats(mask: np.ndarray) -> MaskStats:
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return MaskStats(0, None)
    return MaskStats(int(rows.size), (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())))


def binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def filter_proposals(raw: Sequence[np.ndarray], area_min: int = AREA_MIN,
                     iou_dedupe: float = IOU_DEDUPE, p: int = NUM_PROPOSALS,
                     shape: tuple[int, int] | None = None) -> ProposalSet:
    """Drop small masks, greedily drop near-duplicates (larger kept), keep the ``p`` largest, pad.

    Output order is area-descending with the raw index as tiebreak.
    """
    masks = [np.asarray(m, dtype=bool) for m in raw]
    shapes = {m.shape for m in masks}
    if len(shapes) > 1:
        raise InvalidInputError(f"proposals have mixed resolutions: {sorted(shapes)}")
    if shape is None:
        if not masks:
            raise InvalidInputError("no proposals and no shape given")
        shape = masks[0].shape
    elif masks and masks[0].shape != tuple(shape):
        raise InvalidInputError("proposal resolution does not match requested shape")
    areas = [int(m.sum()) for m in masks]
    order = sorted((i for i in range(len(masks)) if areas[i] >= area_min),
                   key=lambda i: (-areas[i], i))
    kept: list[int] = []
    for i in order:
        if all(binary_iou(masks[i], masks[j]) <= iou_dedupe for j in kept):
            kept.append(i)
    kept = kept[:p]
    out = np.zeros((p, *shape), dtype=bool)
    valid = np.zeros(p, dtype=bool)
    for slot, i in enumerate(kept):
        out[slot] = masks[i]
        valid[slot] = True
    return ProposalSet(out, valid)


def upsample(maps: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear (half-pixel centers) resize of (..., h, w) maps to (..., *size)."""
    lead = maps.shape[:-2]
    flat = maps.reshape(-1, 1, *maps.shape[-2:])
    if tuple(flat.shape[-2:]) == tuple(size):
        return maps
    up = F.interpolate(flat, size=tuple(size), mode="bilinear", align_corners=False)
    return up.reshape(*lead, *size)


def soft_iou(response: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """sum(min(R, m)) / sum(max(R, m)) over the last two axes; 0 where the union is empty."""
    response = torch.as_tensor(response)
    mask = torch.as_tensor(mask, dtype=response.dtype)
    if response.shape[-2:] != mask.shape[-2:]:
        raise InvalidInputError("response and mask resolutions differ")
    inter = torch.minimum(response, mask).sum(dim=(-2, -1))
    union = torch.maximum(response, mask).sum(dim=(-2, -1))
    safe = torch.where(union > 0, union, torch.ones_like(union))
    return torch.where(union > 0, inter / safe, torch.zeros_like(inter))


# --- synthetic proposals --------------------------------------------------

DISTRACTOR_KINDS = ("translate", "dilate", "merge")


def _translate(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    src = mask[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    out[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    return out


def synth_raw_proposals(gt_masks: Sequence[np.ndarray], n_distractors: int, seed: int,
                        kinds: Sequence[str] = DISTRACTOR_KINDS,
                        max_shift: int = 12) -> list[np.ndarray]:
    """GT instance masks followed by ``n_distractors`` perturbed copies."""
    gts = [np.asarray(m, dtype=bool) for m in gt_masks]
    if not gts:
        raise InvalidInputError("need at least one ground-truth mask")
    rng = np.random.default_rng(seed)
    out = list(gts)
    for i in range(n_distractors):
        kind = kinds[i % len(kinds)]
        src = gts[int(rng.integers(len(gts)))]
        if kind == "merge" and len(gts) >= 2:
            a, b = rng.choice(len(gts), size=2, replace=False)
            out.append(gts[a] | gts[b])
        elif kind in ("dilate", "merge"):
            out.append(ndimage.binary_dilation(src, iterations=int(rng.integers(1, 4))))
        elif kind == "translate":
            lo = max(1, max_shift // 3)
            dy, dx = (int(v) * int(s) for v, s in
                      zip(rng.integers(lo, max_shift + 1, size=2), rng.choice([-1, 1], size=2)))
            out.append(_translate(src, dy, dx))
        else:
            raise InvalidInputError(f"unknown distractor kind {kind!r}")
    return out


def synth_proposals(gt_masks: Sequence[np.ndarray], n_distractors: int, seed: int,
                    kinds: Sequence[str] = DISTRACTOR_KINDS, area_min: int = AREA_MIN,
                    iou_dedupe: float = IOU_DEDUPE, p: int = NUM_PROPOSALS) -> ProposalSet:
    raw = synth_raw_proposals(gt_masks, n_distractors, seed, kinds)
    return filter_proposals(raw, area_min, iou_dedupe, p)


# --- RLE and the proposal file ---------------------------------------------

def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating 0-runs and 1-runs, starting with a 0-run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], height: int, width: int) -> np.ndarray:
    total = int(sum(runs))
    if total != height * width:
        raise InvalidInputError(f"RLE covers {total} pixels, expected {height * width}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(height, width)


def proposals_to_json(image_id: str, masks: Sequence[np.ndarray],
                      shape: tuple[int, int] | None = None) -> dict:
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if masks:
        h, w = masks[0].shape
    elif shape is not None:
        h, w = shape
    else:
        raise InvalidInputError("no masks to serialize and no shape given")
    return {
        "image_id": image_id,
        "height": int(h),
        "width": int(w),
        "masks": [{"rle": rle_encode(m), "area": int(m.sum())} for m in masks],
    }


def proposals_from_json(doc: dict) -> tuple[str, list[np.ndarray]]:
    h, w = int(doc["height"]), int(doc["width"])
    masks = []
    for entry in doc["masks"]:
        m = rle_decode(entry["rle"], h, w)
        if "area" in entry and int(entry["area"]) != int(m.sum()):
            raise InvalidInputError("stored area disagrees with decoded mask")
        masks.append(m)
    return doc["image_id"], masks


def save_proposals(path: str | os.PathLike, image_id: str, masks: Sequence[np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(proposals_to_json(image_id, masks), fh)


def load_proposals(path: str | os.PathLike) -> tuple[str, list[np.ndarray]]:
    with open(path, encoding="utf-8") as fh:
        return proposals_from_json(json.load(fh))
