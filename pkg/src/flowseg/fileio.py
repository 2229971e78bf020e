"""Binary file formats: PPM (P6) frames, PGM (P5) masks/labels, Middlebury
.flo flows.

Frames quantize to 8 bits on write; the synthetic generator emits textures
already on the 1/255 grid so integer-displacement scenes survive a round trip
bit-exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError

FLO_MAGIC = 202021.25  # spells "PIEH" as little-endian float32 bytes


def _read_pnm_header(fh, magic):
    if fh.readline().strip() != magic:
        raise DataError(f"expected {magic.decode()} header")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise DataError("truncated PNM header")
        if line.startswith(b"#"):
            continue
        fields.extend(line.split())
    w, h, maxval = (int(v) for v in fields[:3])
    if maxval != 255:
        raise DataError(f"unsupported maxval {maxval}")
    return w, h


def write_ppm(path, image):
    """image: (H, W, 3) floats in [0, 1]; stored as 8-bit binary P6."""
    image = np.asarray(image)
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        w, h = _read_pnm_header(fh, b"P6")
        raw = fh.read(3 * w * h)
    if len(raw) != 3 * w * h:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(path, values):
    """values: (H, W) integers in [0, 255]."""
    data = np.asarray(values).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        w, h = _read_pnm_header(fh, b"P5")
        raw = fh.read(w * h)
    if len(raw) != w * h:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


def write_mask_pgm(path, mask):
    """Hard occlusion mask as P5: 255 = occluded, 0 = visible."""
    values = mask.values if hasattr(mask, "values") else np.asarray(mask)
    write_pgm(path, (values > 0.5).astype(np.uint8) * 255)


def read_mask_pgm(path):
    return (read_pgm(path) >= 128).astype(np.float64)


def write_flo(path, flow):
    """Middlebury format: magic, width i32, height i32, interleaved float32 dx,dy."""
    data = flow.data if hasattr(flow, "data") else np.asarray(flow)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_flo(path):
    with open(path, "rb") as fh:
        (magic,) = struct.unpack("<f", fh.read(4))
        if abs(magic - FLO_MAGIC) > 1e-3:
            raise DataError(f"{path}: bad .flo magic {magic}")
        w, h = struct.unpack("<ii", fh.read(8))
        raw = fh.read(8 * w * h)
    if len(raw) != 8 * w * h:
        raise DataError(f"{path}: truncated flow data")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, 2).astype(np.float64)
