"""File codecs: TSAL raw tensors, fixation CSV, and binary PPM/PGM."""

from __future__ import annotations

import csv
import io
import re
import struct
from pathlib import Path

import numpy as np

from .data import FixationSet
from .exceptions import FormatError, MagicMismatchError, NonFiniteError, TruncatedPayloadError

TSAL_MAGIC = b"TSAL"
TSAL_VERSION = 1


def encode_tsal(array):
    arr = np.asarray(array)
    if not 1 <= arr.ndim <= 255:
        raise FormatError(f"cannot encode rank-{arr.ndim} array")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise NonFiniteError("refusing to write non-finite values")
    head = TSAL_MAGIC + struct.pack("<BB", TSAL_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + payload.tobytes()


def decode_tsal(buf):
    """Parse a TSAL byte string into a float32 array."""
    if len(buf) < 6:
        raise TruncatedPayloadError("file shorter than the TSAL header")
    if buf[:4] != TSAL_MAGIC:
        raise MagicMismatchError(f"bad magic {buf[:4]!r}, expected {TSAL_MAGIC!r}")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != TSAL_VERSION:
        raise FormatError(f"unsupported TSAL version {version}")
    if rank == 0:
        raise FormatError("rank 0 is not allowed")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise TruncatedPayloadError("truncated extents")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    n = int(np.prod(shape))
    if len(buf) != off + 4 * n:
        raise TruncatedPayloadError(
            f"payload has {len(buf) - off} bytes, shape {shape} needs {4 * n}")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("payload contains NaN or Inf")
    return arr.astype(np.float32)


def save_tsal(path, array):
    Path(path).write_bytes(encode_tsal(array))


def load_tsal(path):
    return decode_tsal(Path(path).read_bytes())


# -- fixations ---------------------------------------------------------------

def read_fixations_csv(path, width=None, height=None):
    """Read ``x,y,observer`` rows; clamp into the grid when its size is given."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y", "observer"]:
            raise FormatError(f"{path}: expected header 'x,y,observer', got {header}")
        rows = [r for r in reader if r]
    try:
        xs = [float(r[0]) for r in rows]
        ys = [float(r[1]) for r in rows]
        obs = [int(r[2]) for r in rows]
    except (ValueError, IndexError) as err:
        raise FormatError(f"{path}: bad fixation row ({err})") from None
    fx = FixationSet(xs, ys, obs)
    if width is not None and height is not None:
        fx = fx.clamped(width, height)
    return fx


def write_fixations_csv(path, fx):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "observer"])
    for x, y, o in zip(fx.x, fx.y, fx.observer):
        w.writerow([repr(float(x)), repr(float(y)), int(o)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# -- netpbm ------------------------------------------------------------------

_PNM_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                         rb"(?:#[^\n]*\n\s*)*(\d+)\s")


def _read_pnm(buf, magic):
    m = _PNM_HEADER.match(buf)
    if not m or m.group(1) != magic:
        raise MagicMismatchError(f"not a binary {magic.decode()} file")
    w, h, maxval = (int(m.group(i)) for i in (2, 3, 4))
    if maxval != 255:
        raise FormatError(f"only 8-bit netpbm supported (maxval {maxval})")
    chans = 3 if magic == b"P6" else 1
    data = buf[m.end():]
    if len(data) < w * h * chans:
        raise TruncatedPayloadError("netpbm payload truncated")
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * chans)
    return arr.reshape(h, w, chans)


def read_ppm(path):
    """Load a P6 file as a (3, H, W) float image in [0, 1]."""
    arr = _read_pnm(Path(path).read_bytes(), b"P6")
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path, img):
    img = np.asarray(img, dtype=np.float64)
    pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = pix.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pix.tobytes())


def read_pgm(path):
    arr = _read_pnm(Path(path).read_bytes(), b"P5")
    return arr[:, :, 0].astype(np.float64) / 255.0


def write_pgm(path, density):
    """Export a map for viewing, scaled so its maximum maps to 255."""
    d = np.asarray(density, dtype=np.float64)
    peak = d.max()
    scaled = d / peak if peak > 0 else np.zeros_like(d)
    pix = np.clip(np.rint(255.0 * scaled), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pix.tobytes())
