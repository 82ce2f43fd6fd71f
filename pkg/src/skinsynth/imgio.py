"""Image file I/O and resampling helpers.

All images travel through the pipeline as float64 arrays in [0, 1]
(RGB, channels last) or as integer label arrays. PNG is the only
on-disk format.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


def load_image(path: str | Path) -> np.ndarray:
    """Load an RGB image as float64 in [0, 1], shape (H, W, 3)."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=np.float64) / 255.0


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Save a float image in [0, 1] as an 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_binary_mask(path: str | Path) -> np.ndarray:
    """Load a mask PNG as a 0/1 uint8 array (any nonzero pixel -> 1)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


def load_label_image(path: str | Path) -> np.ndarray:
    """Load an integer label image (8- or 16-bit grayscale) unmodified."""
    with Image.open(path) as im:
        if im.mode not in ("L", "I", "I;16", "P"):
            im = im.convert("L")
        arr = np.asarray(im)
    return arr.astype(np.int32)


def save_label_image(path: str | Path, labels: np.ndarray) -> None:
    """Save an integer label image; 16-bit when any id exceeds 255."""
    labels = np.asarray(labels)
    if labels.max(initial=0) > 255:
        Image.fromarray(labels.astype(np.uint16), mode="I;16").save(path)
    else:
        Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def save_palette_image(path: str | Path, labels: np.ndarray, palette: np.ndarray) -> None:
    """Save a small-integer label image as an indexed-color PNG.

    palette: (K, 3) uint8 rows; label value k is displayed with palette[k].
    """
    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    flat = np.zeros(256 * 3, dtype=np.uint8)
    flat[: palette.size] = np.asarray(palette, dtype=np.uint8).ravel()
    im.putpalette(flat.tolist())
    im.save(path)


def save_depth_image(path: str | Path, depth: np.ndarray, scale: float = 1e4) -> None:
    """Save a depth map as 16-bit PNG: value = round(depth * scale), 0 off-body."""
    body = depth > 0
    enc = np.zeros(depth.shape, dtype=np.uint16)
    enc[body] = np.clip(np.round(depth[body] * scale), 1, 65535).astype(np.uint16)
    Image.fromarray(enc, mode="I;16").save(path)


def load_depth_image(path: str | Path, scale: float = 1e4) -> np.ndarray:
    """Inverse of save_depth_image; off-body pixels come back as -1."""
    with Image.open(path) as im:
        enc = np.asarray(im, dtype=np.float64)
    depth = enc / scale
    depth[enc == 0] = -1.0
    return depth


def resize_image(image: np.ndarray, shape: tuple[int, int], order: int = 1) -> np.ndarray:
    """Resample to (height, width). order=1 bilinear, order=0 nearest.

    Sampling is edge-aligned on pixel centers, so a same-size call is the
    identity and masks keep crisp boundaries with order=0.
    """
    h_out, w_out = shape
    h_in, w_in = image.shape[:2]
    if (h_in, w_in) == (h_out, w_out):
        return image.copy()
    rows = (np.arange(h_out) + 0.5) * h_in / h_out - 0.5
    cols = (np.arange(w_out) + 0.5) * w_in / w_out - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    coords = np.stack([rr, cc])
    if image.ndim == 2:
        return ndimage.map_coordinates(image.astype(np.float64), coords, order=order, mode="nearest")
    out = np.empty((h_out, w_out, image.shape[2]), dtype=np.float64)
    for c in range(image.shape[2]):
        out[..., c] = ndimage.map_coordinates(
            image[..., c].astype(np.float64), coords, order=order, mode="nearest"
        )
    return out


def fit_to_shape(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Center-crop to the target aspect ratio, then resize to (height, width)."""
    h_out, w_out = shape
    h_in, w_in = image.shape[:2]
    target_aspect = w_out / h_out
    in_aspect = w_in / h_in
    if in_aspect > target_aspect:
        keep_w = max(1, int(round(h_in * target_aspect)))
        x0 = (w_in - keep_w) // 2
        image = image[:, x0 : x0 + keep_w]
    elif in_aspect < target_aspect:
        keep_h = max(1, int(round(w_in / target_aspect)))
        y0 = (h_in - keep_h) // 2
        image = image[y0 : y0 + keep_h]
    return resize_image(image, shape, order=1)
