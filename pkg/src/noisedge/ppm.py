"""Binary portable-pixmap I/O: P6 for color images, P5 for masks.

Headers are ASCII tokens (magic, width, height, maxval) separated by
whitespace, with ``#`` comments running to end of line, followed by one
whitespace byte and raw big-endian-free uint8 samples. Parse errors report
the byte position so a truncated or corrupted file is easy to pinpoint.
"""
from __future__ import annotations

import numpy as np


class PpmError(ValueError):
    pass


def _tokens(buf: bytes, count: int, start: int):
    """Read ``count`` whitespace-separated tokens from ``start``; returns
    (tokens, position after the single whitespace byte ending the header)."""
    toks = []
    pos = start
    while len(toks) < count:
        if pos >= len(buf):
            raise PpmError(f"unexpected end of header at byte {pos}")
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(buf) and not buf[end:end + 1].isspace() and buf[end:end + 1] != b"#":
                end += 1
            toks.append((buf[pos:end], pos))
            pos = end
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PpmError(f"expected whitespace after header at byte {pos}")
    return toks, pos + 1


def _parse(buf: bytes, path, magic: bytes, channels: int) -> np.ndarray:
    if buf[:2] != magic:
        raise PpmError(f"{path}: bad magic {buf[:2]!r} at byte 0, expected {magic.decode()}")
    toks, pos = _tokens(buf, 3, 2)
    dims = []
    for raw, at in toks:
        if not raw.isdigit():
            raise PpmError(f"{path}: non-numeric header token {raw!r} at byte {at}")
        dims.append(int(raw))
    width, height, maxval = dims
    if maxval != 255:
        raise PpmError(f"{path}: only maxval 255 supported, got {maxval}")
    need = width * height * channels
    data = buf[pos:pos + need]
    if len(data) < need:
        raise PpmError(f"{path}: pixel data truncated at byte {pos + len(data)} "
                       f"(need {need} bytes from byte {pos})")
    arr = np.frombuffer(data, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, channels).copy()


def read_ppm(path) -> np.ndarray:
    """(H, W, 3) uint8 RGB from a binary P6 file."""
    with open(path, "rb") as fh:
        return _parse(fh.read(), path, b"P6", 3)


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(np.round(image), 0, 255).astype(np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    """(H, W) uint8 from a binary P5 file."""
    with open(path, "rb") as fh:
        return _parse(fh.read(), path, b"P5", 1)


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"expected (H, W) array, got {gray.shape}")
    if gray.dtype == bool:
        gray = gray.astype(np.uint8) * 255
    elif gray.dtype != np.uint8:
        gray = np.clip(np.round(gray), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(gray.tobytes())


def read_mask(path) -> np.ndarray:
    """Boolean mask from P5, binarized at 128."""
    return read_pgm(path) >= 128


def write_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, np.asarray(mask, dtype=bool))
