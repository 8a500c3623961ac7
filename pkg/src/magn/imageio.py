"""PNG reading/writing with values mapped to [0, 1].

8-bit and 16-bit grayscale go through Pillow.  Pillow silently reduces 16-bit
colour PNGs to 8 bits, so those are handled by OpenCV when it is installed.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["read_png", "write_png", "list_pngs", "to_channels", "bit_depth"]

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _ihdr(path: Path) -> tuple[int, int]:
    """(bit depth, colour type) from the PNG header."""
    with open(path, "rb") as fh:
        head = fh.read(26)
    if len(head) < 26 or head[:8] != _PNG_MAGIC or head[12:16] != b"IHDR":
        raise ValueError(f"{path} is not a PNG file")
    return struct.unpack(">BB", head[24:26])


def bit_depth(path) -> int:
    """8 or 16; lower depths count as 8."""
    return 16 if _ihdr(Path(path))[0] == 16 else 8


def _cv2():
    try:
        import cv2
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("16-bit colour PNGs need opencv-python installed") from exc
    return cv2


def read_png(path) -> np.ndarray:
    """Read a PNG as float64 ``(H, W, 1)`` or ``(H, W, 3)`` in [0, 1]; alpha is dropped."""
    path = Path(path)
    depth, ctype = _ihdr(path)
    if depth == 16 and ctype in (2, 6):
        cv2 = _cv2()
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        rgb = raw[..., 2::-1] if raw.shape[-1] >= 3 else raw
        return rgb.astype(np.float64) / 65535.0
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
            return arr[..., None]
        if im.mode in ("L", "1", "LA"):
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            return arr[..., None]
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def write_png(path, img: np.ndarray, bits: int = 8) -> None:
    """Clip to [0, 1], quantise, and write atomically (temp file + rename)."""
    path = Path(path)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[-1] not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got shape {img.shape}")
    top = 255 if bits == 8 else 65535
    q = np.rint(np.clip(img, 0.0, 1.0) * top)
    fd, tmp = tempfile.mkstemp(suffix=".png", dir=path.parent)
    os.close(fd)
    try:
        if bits == 8:
            arr = q.astype(np.uint8)
            Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr).save(tmp, format="PNG")
        elif bits == 16 and img.shape[-1] == 1:
            Image.fromarray(q[..., 0].astype(np.uint16)).save(tmp, format="PNG")
        elif bits == 16:
            _cv2().imwrite(tmp, q.astype(np.uint16)[..., ::-1])
        else:
            raise ValueError(f"bits must be 8 or 16, got {bits}")
        os.chmod(tmp, 0o644)  # mkstemp creates 0600
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def list_pngs(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


def to_channels(img: np.ndarray, channels: int) -> np.ndarray:
    """Convert between grayscale and RGB (luminance / replication)."""
    if img.shape[-1] == channels:
        return img
    if channels == 1:
        return (img @ np.array([0.299, 0.587, 0.114]))[..., None]
    return np.repeat(img, 3, axis=-1)
