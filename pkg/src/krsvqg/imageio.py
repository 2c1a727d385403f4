"""Image files: raw ``.npy`` arrays and binary PPM (P6) rasters.

``.npy`` files hold an (H, W, 3) array, either float in [0, 1] or uint8.
PPM files are the netpbm P6 format with maxval 255. Both are resized to
the model's square input size with bilinear interpolation.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError("%s is not a binary PPM (P6) file" % path)
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("%s: only maxval 255 is supported" % path)
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=m.end())
    return pixels.reshape(h, w, 3)


def write_ppm(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def to_unit_float(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32)
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("float images must lie in [0, 1]")
    return arr


def resize(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[:2] == (size, size):
        return image.astype(np.float32)
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).clamp(0, 1).numpy()


def load_image(path, size: int) -> np.ndarray:
    """Read an image file and return a (size, size, 3) float32 array in [0, 1]."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path, allow_pickle=False)
    elif path.suffix in (".ppm", ".pnm"):
        arr = read_ppm(path)
    else:
        raise ValueError("unsupported image format %r (use .npy or .ppm)" % path.suffix)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("%s: expected an (H, W, 3) image, got shape %s" % (path, arr.shape))
    return resize(to_unit_float(arr), size)


def resolve_image(ref: str, base_dir) -> Path:
    """Find the file for an image reference, relative to ``base_dir`` if needed."""
    p = Path(ref)
    if p.is_file():
        return p
    base = Path(base_dir)
    for candidate in (base / ref, base / (ref + ".npy"), base / (ref + ".ppm")):
        if candidate.is_file():
            return candidate
    raise FileNotFoundError("image %r not found under %s" % (ref, base))
