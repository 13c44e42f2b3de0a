"""MIP rendering to 8-bit grayscale PNG with window/level."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .volume import ScalarVolume, mip

DEFAULT_WINDOW = 2000.0
DEFAULT_LEVEL = 300.0


def mip_image(vol: ScalarVolume, axis: str = "sagittal",
              window: float = DEFAULT_WINDOW, level: float = DEFAULT_LEVEL) -> np.ndarray:
    """Windowed MIP as a uint8 image, superior side up."""
    if window <= 0:
        raise ValueError(f"window must be positive, got {window}")
    proj = mip(vol, axis)
    lo = level - window / 2.0
    scaled = np.clip((proj - lo) / window, 0.0, 1.0) * 255.0
    img = np.rint(scaled).astype(np.uint8)
    if axis in ("sagittal", "coronal"):
        img = img.T[::-1]  # z up
    return img


def save_mip_png(vol: ScalarVolume, axis: str, path,
                 window: float = DEFAULT_WINDOW, level: float = DEFAULT_LEVEL) -> None:
    Image.fromarray(mip_image(vol, axis, window, level), mode="L").save(str(path), format="PNG")
