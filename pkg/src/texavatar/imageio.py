"""PFM (linear float) and PNG (gamma-encoded preview) image files."""
import re
from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path, image):
    """Little-endian PFM. Accepts (H, W) or (H, W, 3); rows are stored bottom-up."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim == 2:
        tag = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"cannot write image of shape {image.shape} as PFM")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(np.flipud(image)).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        tag = f.readline().rstrip()
        if tag not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        dims = re.match(rb"^(\d+)\s+(\d+)\s*$", f.readline())
        if not dims:
            raise ValueError(f"{path}: malformed PFM header")
        w, h = int(dims.group(1)), int(dims.group(2))
        scale = float(f.readline().rstrip())
        dtype = "<f4" if scale < 0 else ">f4"
        shape = (h, w, 3) if tag == b"PF" else (h, w)
        data = np.fromfile(f, dtype=dtype)
    if data.size != np.prod(shape):
        raise ValueError(f"{path}: truncated PFM payload")
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_png(path, image, gamma=2.2):
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) ** (1.0 / gamma)
    image = np.round(image * 255.0).astype(np.uint8)
    Image.fromarray(image).save(path)


def read_png(path, gamma=2.2):
    return (np.asarray(Image.open(path), dtype=np.float64) / 255.0) ** gamma


def save_image(stem, image):
    """Writes ``stem.pfm`` and ``stem.png``."""
    stem = Path(stem)
    write_pfm(stem.with_suffix(".pfm"), image)
    write_png(stem.with_suffix(".png"), image)
