"""Binary PGM (P5, maxval 255) images mapped linearly to [0, 1]."""
from __future__ import annotations

import os

import numpy as np

__all__ = ["read_pgm", "write_pgm", "read_channels", "write_channels"]


def _tokens(buf: bytes, count: int):
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    (magic, w, h, maxval), pos = _tokens(buf, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    data = np.frombuffer(buf[pos:pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w).astype(np.float64) / 255.0


def write_pgm(path, image) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ValueError("write_pgm expects a single-channel image")
    pix = np.round(np.clip(np.nan_to_num(image), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def write_channels(prefix, image) -> list[str]:
    """One PGM per channel: ``<prefix>_c0.pgm``, ``<prefix>_c1.pgm``, ..."""
    image = np.asarray(image)
    paths = []
    for c in range(image.shape[0]):
        p = f"{prefix}_c{c}.pgm"
        write_pgm(p, image[c])
        paths.append(p)
    return paths


def read_channels(paths) -> np.ndarray:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    return np.stack([read_pgm(p) for p in paths])
