"""Binary PPM (P6) and PGM (P5) image files, 8 bits per sample.

Any viewer that reads netpbm opens these; ``PIL.Image.open`` converts them
to PNG if needed.
"""

import numpy as np


def to_bytes(image):
    """``(3, H, W)`` floats in [0, 1] -> ``(H, W, 3)`` uint8."""
    image = np.asarray(image, float)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {image.shape}")
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path, image):
    data = to_bytes(image)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def write_pgm(path, values):
    """Write an ``(H, W)`` array of integers in [0, 255] (labels or a 0/1 mask)."""
    values = np.asarray(values)
    if values.ndim != 2 or values.min() < 0 or values.max() > 255:
        raise ValueError("expected an (H, W) array with values in [0, 255]")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(values.astype(np.uint8).tobytes())


def _read(path, magic):
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end].decode("ascii"))
        pos = end
    if fields[0] != magic:
        raise ValueError(f"{path}: not a {magic} file")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    return np.frombuffer(data[pos + 1:], dtype=np.uint8), h, w


def read_ppm(path):
    """Return ``(3, H, W)`` floats in [0, 1]."""
    raw, h, w = _read(path, "P6")
    return raw[:h * w * 3].reshape(h, w, 3).transpose(2, 0, 1) / 255.0


def read_pgm(path):
    raw, h, w = _read(path, "P5")
    return raw[:h * w].reshape(h, w).copy()
