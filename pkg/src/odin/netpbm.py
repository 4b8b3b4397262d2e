"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

import os

import numpy as np


class NetpbmError(ValueError):
    """Malformed or unsupported netpbm file; message names the byte offset."""


def _to_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H×W×3 image, got {image.shape}")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + _to_bytes(image).tobytes()


def encode_pgm(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected H×W label map, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= 255):
        raise ValueError("label values must lie in [0, 255)")
    h, w = labels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + labels.astype(np.uint8).tobytes()


def _parse_header(buf: bytes, magic: bytes) -> tuple[int, int, int]:
    """Return (width, height, payload_offset)."""
    if buf[:2] != magic:
        raise NetpbmError(f"byte 0: expected magic {magic.decode()}, got {buf[:2]!r}")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        # whitespace and comments
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise NetpbmError(f"byte {start}: expected an integer header field")
        value = int(buf[start:pos])
        if len(fields) < 2 and value < 1:
            raise NetpbmError(f"byte {start}: image extent must be positive")
        if len(fields) == 2 and value != 255:
            raise NetpbmError(f"byte {start}: unsupported maxval {value} (only 255)")
        fields.append(value)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise NetpbmError(f"byte {pos}: expected single whitespace after maxval")
    return fields[0], fields[1], pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    w, h, off = _parse_header(buf, b"P6")
    need = w * h * 3
    if len(buf) - off < need:
        raise NetpbmError(f"byte {len(buf)}: truncated payload, expected {need} bytes from offset {off}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def decode_pgm(buf: bytes) -> np.ndarray:
    w, h, off = _parse_header(buf, b"P5")
    need = w * h
    if len(buf) - off < need:
        raise NetpbmError(f"byte {len(buf)}: truncated payload, expected {need} bytes from offset {off}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    return data.reshape(h, w).astype(np.int64)


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def read_image(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_labelmap(path: str | os.PathLike, labels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(labels))


def read_labelmap(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())
