"""8-bit image reading and writing.

Binary PGM (P5) and PPM (P6) are handled natively and are the lossless
interchange format. PNG and JPEG go through Pillow.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import DataError

PNM_SUFFIXES = {".pgm", ".ppm", ".pnm"}
IMAGE_SUFFIXES = PNM_SUFFIXES | {".png", ".jpg", ".jpeg", ".bmp"}


def _pnm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise DataError("truncated PNM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    tokens, offset = _pnm_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported PNM type {magic!r}; only binary P5/P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError("malformed PNM header") from None
    if width < 1 or height < 1:
        raise DataError(f"invalid PNM size {width}x{height}")
    if not 0 < maxval < 256:
        raise DataError(f"only 8-bit PNM supported, maxval={maxval}")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    raster = data[offset:offset + need]
    if len(raster) != need:
        raise DataError(f"truncated PNM raster: {len(raster)} of {need} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return arr.reshape(shape).copy()


def encode_pnm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {image.dtype}")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode image of shape {image.shape} as PNM")
    h, w = image.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes()


def read_image(path) -> np.ndarray:
    """Return an 8-bit array, (h, w) for grayscale or (h, w, 3) for color."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if data[:2] in (b"P5", b"P6"):
        return decode_pnm(data)
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.mode in ("L", "RGB"):
                arr = np.asarray(im)
            elif im.mode in ("1", "P", "RGBA", "LA", "CMYK", "YCbCr"):
                arr = np.asarray(im.convert("L" if im.mode in ("1", "LA") else "RGB"))
            else:
                raise DataError(f"{path}: unsupported image mode {im.mode}")
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from None
    return np.array(arr, dtype=np.uint8)


def write_image(path, image: np.ndarray) -> None:
    """Write an 8-bit image; the format follows the file suffix."""
    path = Path(path)
    image = np.asarray(image)
    suffix = path.suffix.lower()
    tmp = path.with_name(path.name + ".tmp")
    if suffix in PNM_SUFFIXES:
        tmp.write_bytes(encode_pnm(image))
    elif suffix in (".png", ".bmp"):
        from PIL import Image

        Image.fromarray(np.ascontiguousarray(image)).save(tmp, format=suffix[1:].upper())
    else:
        raise ValueError(f"unsupported output format {suffix!r} (lossless formats only)")
    os.replace(tmp, path)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"missing directory {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
