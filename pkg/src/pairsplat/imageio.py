"""Binary PPM (P6) and optional PNG output for rendered images."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import CheckpointError


def quantize(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 by rounding; values outside are clipped."""
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    q = quantize(img)
    h, w, _ = q.shape
    return b"P6\n%d %d\n255\n" % (w, h) + q.tobytes()


def write_ppm(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_ppm(img))


_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_ppm(path) -> np.ndarray:
    """Decode a P6 file to floats in [0, 1]."""
    data = Path(path).read_bytes()
    m = _HEADER.match(data)
    if not m:
        raise CheckpointError(f"{path} is not a binary PPM", 0)
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise CheckpointError(f"unsupported maxval {maxval}", m.start(3))
    body = data[m.end():]
    if len(body) != w * h * 3:
        raise CheckpointError(f"truncated pixel data in {path}", m.end() + len(body))
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(img), mode="RGB").save(path)
