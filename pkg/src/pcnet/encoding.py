"""Toy image and text encoders projecting into a shared embedding width.

The image side is a strided conv stack whose total stride equals the grid
stride; the text side averages learned token embeddings.  Both end in a
single linear projector to the unified width ``c``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import InvalidInputError

UNK = "<unk>"


@dataclass(frozen=True)
class EncoderConfig:
    c_v: int = 2048
    c_l: int = 1024
    c: int = 1024
    s: int = 32
    image_size: int = 320
    seed: int = 0
    kernel: int = 2  # stride-2 conv kernel; 2 tiles the image exactly, 4 overlaps neighbours
    context: bool = False  # residual 3x3 conv over the cell grid after the strided stack

    def __post_init__(self) -> None:
        for name in ("c_v", "c_l", "c", "s", "image_size"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.image_size % self.s:
            raise InvalidInputError("image_size must be divisible by the stride")
        if self.s & (self.s - 1) or self.s < 2:
            raise InvalidInputError("stride must be a power of two >= 2")
        if self.kernel < 2 or self.kernel % 2:
            raise InvalidInputError("kernel must be even and >= 2")

    @property
    def grid(self) -> int:
        return self.image_size // self.s

    @classmethod
    def toy(cls, **overrides) -> "EncoderConfig":
        return cls(**{"c_v": 64, "c_l": 64, "c": 64, "s": 8, "image_size": 64, **overrides})


@dataclass
class VisualGrid:
    data: torch.Tensor  # (H, W, C)
    stride: int
    image_size: tuple[int, int]

    def __post_init__(self) -> None:
        h, w = self.image_size
        if self.data.shape[:2] != (h // self.stride, w // self.stride):
            raise InvalidInputError("grid shape does not match image size / stride")
        if not torch.isfinite(self.data).all():
            raise InvalidInputError("visual grid has non-finite entries")


@dataclass
class TextEmbedding:
    data: torch.Tensor  # (C,)
    kind: str = "global"  # global | cue | negative


# --- tokenization ---------------------------------------------------------

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class Vocabulary:
    """Fixed word list; index 0 is reserved for out-of-vocabulary tokens."""

    def __init__(self, words: Iterable[str]):
        self.words = [UNK] + sorted(set(words) - {UNK})
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        return cls(w for t in texts for w in tokenize(t))

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        ids = [self.index.get(w, 0) for w in tokenize(text)]
        if not ids:
            raise InvalidInputError(f"no tokens in {text!r}")
        return ids


# --- modules ----------------------------------------------------------------

def init_uniform_(module: nn.Module, generator: torch.Generator) -> None:
    """Variance-preserving uniform init scaled by fan-in.

    Convolutions get U(-sqrt(6/fan_in), +) (they feed a GELU), linear layers
    U(-sqrt(3/fan_in), +) and biases zero, so activations keep unit scale
    through the stack and the initial image-text logits are not vanishingly
    small. Embedding rows are U(-sqrt(3), sqrt(3)), i.e. unit variance.
    """
    for sub in module.modules():
        if isinstance(sub, (nn.Linear, nn.Conv2d)):
            fan_in = sub.weight[0].numel()
            gain = 6.0 if isinstance(sub, nn.Conv2d) else 3.0
            bound = math.sqrt(gain / fan_in)
            with torch.no_grad():
                sub.weight.copy_(torch.empty_like(sub.weight).uniform_(-bound, bound, generator=generator))
                if sub.bias is not None:
                    sub.bias.zero_()
        elif isinstance(sub, (nn.Embedding, nn.EmbeddingBag)):
            bound = math.sqrt(3.0)
            with torch.no_grad():
                sub.weight.copy_(torch.empty_like(sub.weight).uniform_(-bound, bound, generator=generator))


class ImageEncoder(nn.Module):
    """log2(s) stride-2 convolutions with GELU, then a linear projection.

    Padding is (kernel - 2) / 2 so every layer halves the resolution exactly.
    Replicate padding keeps border cells looking like the scene edge instead
    of a zero frame, which would otherwise be a cheap, location-only feature
    for the max-pooled classifier.

    With kernel 2 each output cell sees exactly its own s x s block. The
    optional context layer adds a residual 3x3 convolution over the cell grid,
    so a cell also sees its neighbours.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        in_ch = 3
        for _ in range(cfg.s.bit_length() - 1):
            layers += [nn.Conv2d(in_ch, cfg.c_v, cfg.kernel, stride=2, padding=(cfg.kernel - 2) // 2,
                                 padding_mode="replicate"), nn.GELU()]
            in_ch = cfg.c_v
        self.backbone = nn.Sequential(*layers)
        self.context = None
        if cfg.context:
            self.context = nn.Sequential(
                nn.Conv2d(cfg.c_v, cfg.c_v, 3, padding=1, padding_mode="replicate"), nn.GELU())
        self.proj = nn.Linear(cfg.c_v, cfg.c)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H_I, W_I) in [0, 1] -> (B, H_I/s, W_I/s, C)."""
        size = self.cfg.image_size
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[2:] != (size, size):
            raise InvalidInputError(
                f"expected images of shape (B, 3, {size}, {size}), got {tuple(images.shape)}")
        feats = self.backbone(images * 2.0 - 1.0)
        if self.context is not None:
            feats = feats + self.context(feats)
        return self.proj(feats.permute(0, 2, 3, 1))


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, vocab_size: int):
        super().__init__()
        self.embed = nn.EmbeddingBag(vocab_size, cfg.c_l, mode="mean")
        self.proj = nn.Linear(cfg.c_l, cfg.c)

    def forward(self, token_ids: Sequence[Sequence[int]]) -> torch.Tensor:
        """Ragged token id lists -> (n, C)."""
        if any(len(ids) == 0 for ids in token_ids):
            raise InvalidInputError("empty token sequence")
        flat = torch.tensor([i for ids in token_ids for i in ids], dtype=torch.long)
        offsets = torch.tensor(np.cumsum([0] + [len(ids) for ids in token_ids[:-1]]), dtype=torch.long)
        return self.proj(self.embed(flat, offsets))


class Encoders(nn.Module):
    """Image and text encoders plus the vocabulary they share a config with."""

    def __init__(self, cfg: EncoderConfig, vocab: Vocabulary):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.image = ImageEncoder(cfg)
        self.text = TextEncoder(cfg, len(vocab))

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        return self.image(images)

    def encode_texts(self, texts: Sequence[str]) -> torch.Tensor:
        return self.text([self.vocab.encode(t) for t in texts])

    def encode_image(self, image) -> VisualGrid:
        """Single raster (H, W, 3), uint8 or float in [0, 1]."""
        arr = as_image_tensor(image, self.image.proj.weight.dtype)
        if arr.shape[1:] != (self.cfg.image_size, self.cfg.image_size):
            raise InvalidInputError(f"image is {tuple(arr.shape[1:])}, expected "
                                    f"{self.cfg.image_size}x{self.cfg.image_size}")
        grid = self.image(arr[None])[0]
        return VisualGrid(grid, self.cfg.s, tuple(arr.shape[1:]))

    def encode_text(self, text: str, kind: str = "global") -> TextEmbedding:
        if not text or not tokenize(text):
            raise InvalidInputError("text has no tokens")
        return TextEmbedding(self.encode_texts([text])[0], kind)


def as_image_tensor(image, dtype=torch.float64) -> torch.Tensor:
    """(H, W, 3) array -> (3, H, W) float tensor in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(f"expected an (H, W, 3) raster, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)), dtype=dtype)


def images_to_tensor(images: Sequence, dtype=torch.float64) -> torch.Tensor:
    return torch.stack([as_image_tensor(im, dtype) for im in images])


def build_encoders(cfg: EncoderConfig, vocab: Vocabulary, dtype=torch.float64) -> Encoders:
    enc = Encoders(cfg, vocab)
    gen = torch.Generator().manual_seed(cfg.seed)
    init_uniform_(enc, gen)
    return enc.to(dtype)

