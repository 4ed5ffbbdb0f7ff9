"""Binary NetPBM (P5 greymap, P6 pixmap) reading and writing, 8 bits per sample."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError, ParseError

_CHANNELS = {b"P5": 1, b"P6": 3}
_WHITESPACE = b" \t\n\r\v\f"


def _header_token(buf: bytes, pos: int):
    """Next whitespace-delimited header token, skipping '#' comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos:pos + 1] not in _WHITESPACE and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of header", start)
    return buf[start:pos], start, pos


def decode(buf: bytes) -> np.ndarray:
    """Parse P5/P6 bytes into uint8 (H, W) or (H, W, 3)."""
    magic = buf[:2]
    if magic not in _CHANNELS:
        raise ParseError(f"bad magic {magic!r}, expected P5 or P6", 0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        tok, start, pos = _header_token(buf, pos)
        if not tok.isdigit():
            raise ParseError(f"{name} is not a decimal integer: {tok!r}", start)
        fields.append((int(tok), start))
    (w, w_at), (h, h_at), (maxval, m_at) = fields
    if w <= 0 or h <= 0:
        raise ParseError(f"non-positive image size {w}x{h}", w_at if w <= 0 else h_at)
    if not 0 < maxval < 256:
        raise ParseError(f"maxval {maxval} unsupported (8-bit only)", m_at)
    if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
        raise ParseError("missing whitespace after maxval", pos)
    pos += 1
    c = _CHANNELS[magic]
    need = w * h * c
    have = len(buf) - pos
    if have < need:
        raise ParseError(f"truncated raster: {have} of {need} bytes present", len(buf))
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    if maxval < 255 and arr.max(initial=0) > maxval:
        raise ParseError(f"sample exceeds maxval {maxval}", pos + int(np.argmax(arr > maxval)))
    arr = arr.reshape((h, w) if c == 1 else (h, w, 3)).copy()
    return arr if maxval == 255 else np.round(arr.astype(np.float64) * 255.0 / maxval).astype(np.uint8)


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise DataError(f"NetPBM writer expects uint8 samples, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"cannot write array of shape {arr.shape} as PGM/PPM")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def read_raw(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write_raw(path, arr: np.ndarray):
    Path(path).write_bytes(encode(arr))


def read_image(path) -> np.ndarray:
    """Read to float32 (1, C, H, W) in [0, 1]."""
    arr = read_raw(path).astype(np.float32) / 255.0
    if arr.ndim == 2:
        return arr[None, None]
    return arr.transpose(2, 0, 1)[None].copy()


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise DataError("write_image takes a single image")
        img = img[0]
    if img.ndim == 3:
        img = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img: np.ndarray):
    """Write (1, C, H, W), (C, H, W) or (H, W) values in [0, 1]; C = 1 gives PGM, C = 3 PPM."""
    write_raw(path, to_uint8(img))


def read_labels(path) -> np.ndarray:
    """Label maps are stored as raw PGM sample values (class ids, 255 = ignore)."""
    arr = read_raw(path)
    if arr.ndim != 2:
        raise DataError(f"{path}: label map must be a greymap (P5)")
    return arr.astype(np.int64)


def write_labels(path, labels: np.ndarray):
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DataError("label map must be 2-D with ids in [0, 255]")
    write_raw(path, labels.astype(np.uint8))
