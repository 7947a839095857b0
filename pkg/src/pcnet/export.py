"""Response-map rasters: 16-bit grayscale PNG plus a JSON sidecar per stage."""
from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .errors import InvalidInputError
from .metrics import Peak

SCALE = 65535


def map_to_u16(response: np.ndarray) -> np.ndarray:
    r = np.asarray(response, dtype=np.float64)
    if r.ndim != 2:
        raise InvalidInputError(f"response map must be 2-D, got shape {r.shape}")
    if not np.isfinite(r).all() or r.min() < 0.0 or r.max() > 1.0:
        raise InvalidInputError("response map values must lie in [0, 1]")
    return np.round(SCALE * r).astype(np.uint16)


def u16_to_map(raster: np.ndarray) -> np.ndarray:
    return np.asarray(raster, dtype=np.float64) / SCALE


def write_raster(path: str | os.PathLike, response: np.ndarray) -> None:
    # a uint16 array maps to Pillow's single-channel 16-bit mode "I;16"
    Image.fromarray(map_to_u16(response)).save(os.fspath(path), format="PNG")


def read_raster(path: str | os.PathLike) -> np.ndarray:
    with Image.open(os.fspath(path)) as im:
        return u16_to_map(np.array(im, dtype=np.uint16))


def export_stage(directory: str | os.PathLike, stage: int, response: np.ndarray, peak: Peak,
                 prefix: str = "stage") -> tuple[str, str]:
    """Write ``{prefix}{stage}.png`` and its ``.json`` sidecar; returns both paths."""
    os.makedirs(directory, exist_ok=True)
    png = os.path.join(directory, f"{prefix}{stage}.png")
    write_raster(png, response)
    meta = {"stage": int(stage), "peak_row": int(peak.row), "peak_col": int(peak.col)}
    side = png[:-4] + ".json"
    with open(side, "w", encoding="utf-8") as fh:
        json.dump(meta, fh)
    return png, side


def export_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    """Binary mask as an 8-bit PNG with values 0 and 255."""
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(os.fspath(path))
