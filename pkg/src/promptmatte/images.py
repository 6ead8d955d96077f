"""8-bit PNG reading/writing for images and alpha mattes.

Arrays are float in [0,1] with an explicit channel axis: RGB images are
(H, W, 3), grayscale/alpha maps are (H, W, 1).
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def load_rgb(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def load_gray(path) -> np.ndarray:
    img = Image.open(path).convert("L")
    return (np.asarray(img, dtype=np.float64) / 255.0)[:, :, None]


def _to_u8(array: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)


def save_rgb(path, array) -> None:
    arr = np.asarray(array)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {arr.shape}")
    Image.fromarray(_to_u8(arr), mode="RGB").save(path)


def save_gray(path, array) -> None:
    arr = np.asarray(array)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) or (H, W, 1), got {np.asarray(array).shape}")
    Image.fromarray(_to_u8(arr), mode="L").save(path)
