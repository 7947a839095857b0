"""Synthetic shapes grounding data, batching, and on-disk serialization."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .cues import decompose_rules
from .errors import InvalidInputError
from .proposals import (
    ProposalSet, filter_proposals, load_proposals, proposals_from_json, proposals_to_json,
    save_proposals, synth_raw_proposals,
)

COLORS = {
    "red": (215, 45, 40),
    "green": (40, 175, 60),
    "blue": (45, 75, 220),
    "yellow": (230, 205, 35),
    "purple": (140, 50, 170),
    "orange": (240, 130, 30),
    "cyan": (40, 200, 210),
}
# Enough color x shape combinations that a text from another image rarely
# matches an object in this one, as with real referring expressions.
SHAPES = ("circle", "square", "triangle", "diamond", "cross")
SIZES = {"small": (7, 9), "large": (11, 13)}  # half-extent range in pixels at 64x64
BACKGROUND = 110
NOISE = 0  # per-pixel background jitter amplitude
GAP = 3  # minimum background pixels between objects


@dataclass
class SceneObject:
    color: str
    shape: str
    size: str
    center: tuple[float, float]  # (row, col)
    radius: int


@dataclass
class GroundingSample:
    image_id: str
    image: np.ndarray              # (H, W, 3) uint8
    texts: list[str]
    gt_masks: list[np.ndarray]     # one (H, W) bool per text
    objects: list[SceneObject] = field(default_factory=list, repr=False)

    @property
    def group_id(self) -> str:
        return self.image_id


def _shape_mask(shape: str, center: tuple[float, float], radius: int, size: int) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size]
    r0, c0 = center
    dy, dx = rr - r0, cc - c0
    if shape == "circle":
        return dy ** 2 + dx ** 2 <= radius ** 2
    if shape == "square":
        half = radius * 0.85
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if shape == "triangle":
        # apex up, base at r0 + radius
        top, bottom = r0 - radius, r0 + radius
        frac = (rr - top) / (bottom - top)
        return (rr >= top) & (rr <= bottom) & (np.abs(dx) <= frac * radius)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= radius
    if shape == "cross":
        arm = radius / 3
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= radius))
    raise InvalidInputError(f"unknown shape {shape!r}")


def _relation(target: SceneObject, anchor: SceneObject) -> str:
    dy = target.center[0] - anchor.center[0]
    dx = target.center[1] - anchor.center[1]
    if abs(dx) >= abs(dy):
        return "left of" if dx < 0 else "right of"
    return "above" if dy < 0 else "below"


def _side(obj: SceneObject, size: int) -> str:
    dy = obj.center[0] - (size - 1) / 2
    dx = obj.center[1] - (size - 1) / 2
    if abs(dx) >= abs(dy):
        return "left" if dx < 0 else "right"
    return "top" if dy < 0 else "bottom"


def describe(target: SceneObject, others: Sequence[SceneObject], size: int,
             rng: np.random.Generator) -> str:
    """A templated expression that names the target's color and shape plus one more cue."""
    anchor = others[int(rng.integers(len(others)))]
    rel = _relation(target, anchor)
    template = int(rng.integers(4))
    t = target
    if template == 0:
        return f"the {t.size} {t.color} {t.shape} {rel} the {anchor.color} {anchor.shape}"
    if template == 1:
        return f"the {t.color} {t.shape} that is {t.size} and {rel} the {anchor.shape}"
    if template == 2:
        return f"the {t.color} {t.shape} on the {_side(t, size)}"
    return f"the {t.size} {t.shape} with {t.color} color"


def _sample_objects(rng: np.random.Generator, n_obj: int, size: int) -> list[SceneObject]:
    """Objects with distinct colors; shapes repeat often so texts still need both words."""
    objs: list[SceneObject] = []
    occupied = np.zeros((size, size), dtype=bool)
    attempts = 0
    while len(objs) < n_obj and attempts < 500:
        attempts += 1
        free = [c for c in COLORS if c not in {o.color for o in objs}]
        color = free[int(rng.integers(len(free)))]
        if objs and rng.random() < 0.5:
            shape = objs[int(rng.integers(len(objs)))].shape
        else:
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
        size_name = "small" if rng.random() < 0.5 else "large"
        lo, hi = (round(v * size / 64) for v in SIZES[size_name])
        radius = int(rng.integers(lo, hi + 1))
        margin = radius + 1
        center = (float(rng.integers(margin, size - margin)), float(rng.integers(margin, size - margin)))
        mask = _shape_mask(shape, center, radius, size)
        if (mask & occupied).any():
            continue
        objs.append(SceneObject(color, shape, size_name, center, radius))
        occupied |= ndimage.binary_dilation(mask, iterations=GAP)
    return objs


def make_sample(index: int, image_size: int = 64, seed: int = 0) -> GroundingSample:
    rng = np.random.default_rng([seed, index])
    n_obj = int(rng.integers(2, 5))
    objs = _sample_objects(rng, n_obj, image_size)
    while len(objs) < 2:
        objs = _sample_objects(rng, n_obj, image_size)
    image = np.full((image_size, image_size, 3), BACKGROUND, dtype=np.int16)
    image += rng.integers(-NOISE, NOISE + 1, size=image.shape, dtype=np.int16)
    masks = []
    for obj in objs:
        m = _shape_mask(obj.shape, obj.center, obj.radius, image_size)
        image[m] = COLORS[obj.color]
        masks.append(m)
    texts = [describe(o, [x for x in objs if x is not o], image_size, rng) for o in objs]
    return GroundingSample(f"s{seed}_{index:05d}", np.clip(image, 0, 255).astype(np.uint8),
                           texts, masks, objs)


def generate_dataset(n_samples: int, image_size: int = 64, seed: int = 0) -> list[GroundingSample]:
    """Deterministic per (seed, index): each sample can be generated independently."""
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    return [make_sample(i, image_size, seed) for i in range(n_samples)]


# --- proposals for a dataset ----------------------------------------------

def dataset_proposals(dataset: Sequence[GroundingSample], n_distractors: int = 4,
                      seed: int = 0, kinds: Sequence[str] = ("translate",),
                      area_min: int = 40, iou_dedupe: float = 0.8, p: int = 8) -> list[ProposalSet]:
    """Synthetic proposals per image: all instance masks plus perturbed copies, filtered."""
    out = []
    for i, sample in enumerate(dataset):
        raw = synth_raw_proposals(sample.gt_masks, n_distractors, seed * 1_000_003 + i, kinds)
        out.append(filter_proposals(raw, area_min, iou_dedupe, p, shape=sample.image.shape[:2]))
    return out


# --- batching -------------------------------------------------------------

@dataclass
class Batch:
    sample_idx: list[int]          # dataset index of each batch entry (distinct images)
    text_idx: list[int]            # which of that image's texts is the positive
    iad_partners: list[list[int]]  # other text indices of the same image

    @property
    def size(self) -> int:
        return len(self.sample_idx)


def make_batches(dataset: Sequence[GroundingSample], b: int, n_d: int = 1, seed: int = 0,
                 epoch: int = 0) -> Iterator[Batch]:
    """One epoch of batches; deterministic per (seed, epoch). Trailing remainder is dropped."""
    n = len(dataset)
    if b > n:
        raise InvalidInputError(f"batch size {b} exceeds dataset size {n}")
    if b < 1 or n_d < 0:
        raise InvalidInputError("b must be >= 1 and n_d >= 0")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n)
    for start in range(0, n - b + 1, b):
        idx = [int(i) for i in order[start:start + b]]
        texts, partners = [], []
        for i in idx:
            n_txt = len(dataset[i].texts)
            t = int(rng.integers(n_txt))
            others = [k for k in range(n_txt) if k != t]
            take = min(n_d, len(others))
            chosen = rng.choice(others, size=take, replace=False).tolist() if take else []
            texts.append(t)
            partners.append([int(k) for k in chosen])
        yield Batch(idx, texts, partners)


def eval_pairs(dataset: Sequence[GroundingSample]) -> list[tuple[int, int]]:
    """Every (sample, text) pair in index order."""
    return [(i, t) for i, s in enumerate(dataset) for t in range(len(s.texts))]


def same_image_pairs(dataset: Sequence[GroundingSample]) -> list[tuple[int, int, int]]:
    """(sample, text_a, text_d) for every ordered pair of distinct texts on one image."""
    return [(i, a, d) for i, s in enumerate(dataset)
            for a in range(len(s.texts)) for d in range(len(s.texts)) if a != d]


def all_texts(dataset: Sequence[GroundingSample]) -> list[str]:
    return [t for s in dataset for t in s.texts]


def check_decomposable(dataset: Sequence[GroundingSample]) -> list[str]:
    """Texts whose rule decomposition yields fewer than two phrases."""
    return [t for t in all_texts(dataset) if decompose_rules(t).k < 2]


# --- serialization ----------------------------------------------------------

def save_dataset(dataset: Sequence[GroundingSample], root: str | os.PathLike,
                 proposals: Sequence[ProposalSet] | None = None) -> None:
    root = os.fspath(root)
    for sub in ("images", "masks", "proposals"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    manifest = []
    for i, s in enumerate(dataset):
        Image.fromarray(s.image).save(os.path.join(root, "images", f"{s.image_id}.png"))
        entries = []
        for k, (text, mask) in enumerate(zip(s.texts, s.gt_masks)):
            rel = os.path.join("masks", f"{s.image_id}_{k}.json")
            save_proposals(os.path.join(root, rel), s.image_id, [mask])
            entries.append({"text": text, "mask_file": rel})
        manifest.append({"image_id": s.image_id, "texts": entries})
        if proposals is not None:
            ps = proposals[i]
            doc = proposals_to_json(s.image_id, list(ps.masks[ps.valid]), ps.shape)
            with open(os.path.join(root, "proposals", f"{s.image_id}.json"), "w") as fh:
                json.dump(doc, fh)
    with open(os.path.join(root, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def load_dataset(root: str | os.PathLike) -> list[GroundingSample]:
    root = os.fspath(root)
    with open(os.path.join(root, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    out = []
    for entry in manifest:
        image = np.asarray(Image.open(os.path.join(root, "images", f"{entry['image_id']}.png")).convert("RGB"))
        texts, masks = [], []
        for t in entry["texts"]:
            _, (mask,) = load_proposals(os.path.join(root, t["mask_file"]))
            texts.append(t["text"])
            masks.append(mask)
        out.append(GroundingSample(entry["image_id"], image, texts, masks))
    return out


def load_dataset_proposals(root: str | os.PathLike, dataset: Sequence[GroundingSample],
                           p: int, area_min: int = 0, iou_dedupe: float = 1.0) -> list[ProposalSet] | None:
    """Proposal files saved alongside a dataset, re-padded to ``p``; None if absent."""
    root = os.fspath(root)
    out = []
    for s in dataset:
        path = os.path.join(root, "proposals", f"{s.image_id}.json")
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as fh:
            _, masks = proposals_from_json(json.load(fh))
        out.append(filter_proposals(masks, area_min, iou_dedupe, p, shape=s.image.shape[:2]))
    return out
