"""Reading and writing images and masks as 8-bit grayscale PNG/PGM files.

Images are stored as 8-bit grayscale (intensities scaled to 0..255 on
write, divided back on read); masks as one 0/255 file per structure.
"""

from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image as PILImage

from .core import Image, LabelMask

__all__ = [
    "load_image",
    "save_image",
    "load_mask_channel",
    "save_mask_channel",
    "load_mask",
    "save_mask",
]

_FORMATS = {".png", ".pgm"}


def _check_format(path: Path):
    if path.suffix.lower() not in _FORMATS:
        raise ValueError(f"unsupported image format {path.suffix!r} for {path}")


def load_image(path) -> Image:
    path = Path(path)
    _check_format(path)
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return Image(arr / 255.0)


def save_image(img: Image, path) -> None:
    path = Path(path)
    _check_format(path)
    arr = np.round(img.pixels * 255.0).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def load_mask_channel(path) -> np.ndarray:
    path = Path(path)
    _check_format(path)
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 127


def save_mask_channel(channel: np.ndarray, path) -> None:
    path = Path(path)
    _check_format(path)
    arr = np.where(np.asarray(channel, dtype=bool), 255, 0).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def load_mask(structures, paths: Mapping[str, "Path"]) -> LabelMask:
    """Assemble a mask from per-structure channel files, in structure order."""
    structures = tuple(structures)
    missing = [s for s in structures if s not in paths]
    if missing:
        raise ValueError(f"missing mask files for structures: {missing}")
    channels = np.stack([load_mask_channel(paths[s]) for s in structures])
    return LabelMask(structures, channels)


def save_mask(mask: LabelMask, paths: Mapping[str, "Path"]) -> None:
    for name in mask.structures:
        save_mask_channel(mask.channel(name), paths[name])
