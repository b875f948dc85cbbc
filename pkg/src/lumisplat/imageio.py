"""Linear-radiance image I/O.

PFM (portable float map) is the native interchange format: lossless
float32, no tone mapping, layout-deterministic bytes.  16-bit PNG is
supported for capture pipelines that store linear radiance scaled into
uint16.  Previews for human inspection are 8-bit PNGs with gamma 2.2.
"""

from __future__ import annotations

import struct
from pathlib import Path

import cv2
import numpy as np

from .errors import SchemaError

PNG16_SCALE = 65535.0


def write_pfm(path: str | Path, image: np.ndarray) -> None:
    """Write a (H, W) or (H, W, {1,3}) float image as little-endian PFM."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        header = b"Pf"
        payload = img
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF"
        payload = img
    else:
        raise SchemaError(f"unsupported image shape {img.shape}")
    h, w = payload.shape[:2]
    # PFM stores rows bottom-to-top; negative scale marks little endian
    data = np.flipud(payload).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(data)


def read_pfm(path: str | Path) -> np.ndarray:
    """Read a PFM image into float64 (H, W, channels)."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise SchemaError(f"not a PFM file: magic {magic!r}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h * channels
        fmt = "<" if scale < 0 else ">"
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise SchemaError("truncated PFM payload")
        img = np.frombuffer(raw, dtype=fmt + "f4").reshape(h, w, channels)
    img = np.flipud(img).astype(np.float64)
    return img.copy()


def write_png16(path: str | Path, image: np.ndarray, max_value: float = 1.0) -> None:
    """Store linear radiance scaled by max_value into a 16-bit PNG."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    scaled = np.clip(img / max_value, 0.0, 1.0) * PNG16_SCALE
    u16 = np.round(scaled).astype(np.uint16)
    if u16.shape[2] == 3:
        u16 = u16[:, :, ::-1]  # cv2 writes BGR
    else:
        u16 = u16[:, :, 0]
    if not cv2.imwrite(str(path), u16):
        raise SchemaError(f"failed to write {path}")


def read_png16(path: str | Path, max_value: float = 1.0) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise SchemaError(f"failed to read {path}")
    if raw.dtype != np.uint16:
        raise SchemaError(f"{path} is not a 16-bit PNG")
    if raw.ndim == 2:
        raw = raw[:, :, None]
    elif raw.shape[2] == 3:
        raw = raw[:, :, ::-1]
    return raw.astype(np.float64) / PNG16_SCALE * max_value


def read_image(path: str | Path) -> np.ndarray:
    """Read a radiance image by extension (.pfm or .png)."""
    p = Path(path)
    if p.suffix.lower() == ".pfm":
        return read_pfm(p)
    if p.suffix.lower() == ".png":
        return read_png16(p)
    raise SchemaError(f"unsupported image format {p.suffix!r}")


def write_preview_png(path: str | Path, image: np.ndarray, gamma: float = 2.2) -> None:
    """8-bit gamma-encoded preview; input is linear radiance."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    peak = img.max()
    if peak > 0:
        img = img / peak
    encoded = np.clip(img, 0.0, 1.0) ** (1.0 / gamma)
    u8 = np.round(encoded * 255.0).astype(np.uint8)
    if u8.shape[2] == 3:
        u8 = u8[:, :, ::-1]
    else:
        u8 = u8[:, :, 0]
    if not cv2.imwrite(str(path), u8):
        raise SchemaError(f"failed to write {path}")


def encode_preview_png_bytes(image: np.ndarray, gamma: float = 2.2) -> bytes:
    """Preview PNG as bytes (for HTTP payloads)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    peak = img.max()
    if peak > 0:
        img = img / peak
    encoded = np.clip(img, 0.0, 1.0) ** (1.0 / gamma)
    u8 = np.round(encoded * 255.0).astype(np.uint8)
    if u8.shape[2] == 3:
        u8 = u8[:, :, ::-1]
    else:
        u8 = u8[:, :, 0]
    ok, buf = cv2.imencode(".png", u8)
    if not ok:
        raise SchemaError("PNG encoding failed")
    return bytes(buf)
