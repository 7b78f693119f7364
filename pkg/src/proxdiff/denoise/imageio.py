"""Binary PPM/PGM reading and writing, and PSNR."""

from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

import numpy as np

__all__ = ["PpmFormatError", "load_ppm", "save_ppm", "as_image", "psnr", "PsnrResult"]


class PpmFormatError(ValueError):
    """Malformed or truncated PPM/PGM file."""


def as_image(values) -> np.ndarray:
    """Validate an ``(H, W, C)`` image with ``C`` in {1, 3} and values in [0, 1]."""
    img = np.asarray(values, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"image must have shape (H, W, 1|3), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return img


def _tokens(data: bytes, count: int):
    """Read `count` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset of the single whitespace byte that
    ends the header.
    """
    out = []
    i = 0
    n = len(data)
    while len(out) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace() and data[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise PpmFormatError("truncated header")
        out.append(data[start:i])
    if i >= n or not data[i : i + 1].isspace():
        raise PpmFormatError("header must end with a whitespace byte")
    return out, i + 1


def load_ppm(path) -> np.ndarray:
    """Read a binary P6 (RGB) or P5 (grayscale) file into ``[0, 1]`` floats.

    Raises
    ------
    PpmFormatError
        On a bad magic number, header, or a short pixel payload.
    """
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P6", b"P5"):
        raise PpmFormatError(f"{path}: expected P6 or P5 magic, got {magic!r}")
    (w, h, maxval), off = _tokens(data[2:], 3)
    off += 2
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise PpmFormatError(f"{path}: non-integer header field") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise PpmFormatError(f"{path}: invalid dimensions or maxval")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * channels * dtype.itemsize
    payload = data[off : off + need]
    if len(payload) < need:
        raise PpmFormatError(f"{path}: truncated pixel data ({len(payload)} of {need} bytes)")
    arr = np.frombuffer(payload, dtype=dtype).astype(np.float64) / maxval
    return np.clip(arr.reshape(h, w, channels), 0.0, 1.0)


def save_ppm(path, img) -> None:
    """Write P6 for 3 channels, P5 for 1, maxval 255, rounding to nearest."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"image must have shape (H, W, 1|3), got {img.shape}")
    h, w, c = img.shape
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = b"P6" if c == 3 else b"P5"
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())


class PsnrResult(NamedTuple):
    value: float
    infinite: bool


def psnr(a, b) -> PsnrResult:
    """``10 log10(1 / MSE)`` for unit-range images; identical inputs give
    ``value=inf`` with ``infinite=True``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PsnrResult(float("inf"), True)
    return PsnrResult(10.0 * np.log10(1.0 / mse), False)
