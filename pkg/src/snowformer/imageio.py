"""8-bit RGB PNG reading/writing as [3,H,W] float arrays in [0,1]."""

from __future__ import annotations

import numpy as np
from PIL import Image, PngImagePlugin

from .errors import IoError, UnsupportedFormat


def png_read(path) -> np.ndarray:
    """Load a PNG as float32 [3,H,W] scaled by 1/255. Grayscale is promoted."""
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    except OSError as e:
        raise UnsupportedFormat(f"cannot decode {path}: {e}") from e
    if img.mode in ("I", "I;16", "I;16B", "I;16L"):
        raise UnsupportedFormat(f"{path}: 16-bit PNG not supported")
    if img.mode in ("1", "L", "P"):
        img = img.convert("L").convert("RGB")
    elif img.mode in ("LA", "RGBA"):
        img = img.convert("RGB")
    elif img.mode != "RGB":
        raise UnsupportedFormat(f"{path}: unsupported mode {img.mode}")
    arr = np.asarray(img, dtype=np.float32) / 255.0  # [H,W,3]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def png_write(image: np.ndarray, path, text: dict | None = None):
    """Write [3,H,W] floats: clip to [0,1], quantize round-half-up to 8 bit."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise IoError(f"png_write expects [3,H,W], got {image.shape}")
    q = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    img = Image.fromarray(q.transpose(1, 2, 0), mode="RGB")
    info = None
    if text:
        info = PngImagePlugin.PngInfo()
        for k, v in text.items():
            info.add_text(str(k), str(v))
    try:
        img.save(path, pnginfo=info)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
