"""Binary PPM (P6) / PGM (P5) image files, with optional PNG via Pillow."""

import numpy as np


def to_u8(img):
    return np.clip(np.rint(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def from_u8(raw):
    return raw.astype(float) / 255.0


def write_ppm(path, img):
    """img: (h, w, 3) float in [0, 1] or uint8."""
    arr = img if img.dtype == np.uint8 else to_u8(img)
    h, w, _ = arr.shape
    try:
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(arr.tobytes())
    except OSError as e:
        raise OSError(f"failed writing image {path}: {e}") from e
    return path


def write_pgm(path, img):
    """img: (h, w) bool, float in [0, 1], or uint8."""
    arr = np.asarray(img)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    elif arr.dtype != np.uint8:
        arr = to_u8(arr)
    h, w = arr.shape
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(arr.tobytes())
    except OSError as e:
        raise OSError(f"failed writing image {path}: {e}") from e
    return path


def _read_pnm(path, magic, channels):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(magic):
        raise ValueError(f"{path} is not a {magic.decode()} file")
    # header: magic, width, height, maxval; '#' comments allowed
    fields, pos = [], len(magic)
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PNM supported")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=pos)
    shape = (h, w, channels) if channels > 1 else (h, w)
    return raw.reshape(shape)


def read_ppm(path):
    """Returns (h, w, 3) float in [0, 1]."""
    return from_u8(_read_pnm(path, b"P6", 3))


def read_pgm(path):
    """Returns (h, w) uint8."""
    return _read_pnm(path, b"P5", 1)


def write_png(path, img):
    """Optional PNG output (for viewing; PPM stays the bit-exact format)."""
    from PIL import Image

    arr = img if img.dtype == np.uint8 else to_u8(img)
    Image.fromarray(arr).save(path)
    return path
