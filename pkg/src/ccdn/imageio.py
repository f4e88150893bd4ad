"""8-bit grayscale image files: binary PGM (P5) natively, PNG through Pillow.

Images live in memory as float arrays in [0, 1]; files hold 8-bit levels.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _read_header_ints(data: bytes, pos: int, count: int):
    values = []
    while len(values) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed PGM header")
        values.append(int(data[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    return values, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise ImageFormatError("not a binary PGM (P5) file")
    (width, height, maxval), pos = _read_header_ints(data, 2, 3)
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"invalid PGM maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = width * height
    if len(data) < pos + n * dtype.itemsize:
        raise ImageFormatError("PGM raster is truncated")
    raster = np.frombuffer(data, dtype=dtype, count=n, offset=pos)
    return raster.reshape(height, width).astype(np.float32) / maxval


def encode_pgm(image: np.ndarray) -> bytes:
    levels = to_uint8(image)
    h, w = levels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + levels.tobytes()


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim != 2:
        raise ImageFormatError(f"expected a grayscale image, got shape {image.shape}")
    return np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """Load a grayscale image as float32 ``(H, W)`` in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return decode_pgm(path.read_bytes())


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(to_uint8(image)).save(path)
    else:
        path.write_bytes(encode_pgm(image))


def draw_overlay(image: np.ndarray, points, radius: int = 2) -> np.ndarray:
    """RGB copy of ``image`` with a red cross at every ``(x, y)`` point."""
    gray = to_uint8(image)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    h, w = gray.shape
    for x, y in points:
        cx, cy = int(round(x)), int(round(y))
        for d in range(-radius, radius + 1):
            for px, py in ((cx + d, cy), (cx, cy + d)):
                if 0 <= px < w and 0 <= py < h:
                    rgb[py, px] = (255, 0, 0)
    return rgb


def write_overlay(path, image: np.ndarray, points) -> None:
    path = Path(path)
    rgb = draw_overlay(image, points)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(rgb).save(path)
    else:
        path.write_bytes(encode_ppm(rgb))
