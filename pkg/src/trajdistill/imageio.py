"""Portable graymap/pixmap (PGM/PPM) reading and writing.

Supports plain (P2/P3) and binary (P5/P6) encodings with any maxval up to
65535; binary samples above 255 are 16-bit big-endian per the netpbm format.
Tensors are float64 arrays shaped (C, H, W) with values in [0, 1].
"""

import numpy as np

from .errors import ImageParseError, ShapeError

_MAGIC = {b"P2": (1, False), b"P3": (3, False), b"P5": (1, True), b"P6": (3, True)}


class _Header:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def _skip(self):
        data = self.data
        while self.pos < len(data):
            c = data[self.pos : self.pos + 1]
            if c == b"#":
                nl = data.find(b"\n", self.pos)
                self.pos = len(data) if nl < 0 else nl + 1
            elif c.isspace():
                self.pos += 1
            else:
                return

    def token(self, what):
        self._skip()
        start = self.pos
        while self.pos < len(self.data) and not self.data[self.pos : self.pos + 1].isspace() and self.data[self.pos : self.pos + 1] != b"#":
            self.pos += 1
        if start == self.pos:
            raise ImageParseError(start, f"expected {what}, found end of data")
        return start, self.data[start : self.pos]

    def integer(self, what, low, high):
        start, tok = self.token(what)
        if not tok.isdigit():
            raise ImageParseError(start, f"expected integer {what}, found {tok[:16]!r}")
        value = int(tok)
        if not low <= value <= high:
            raise ImageParseError(start, f"{what} {value} outside [{low}, {high}]")
        return value


def decode_pnm(data: bytes):
    hdr = _Header(data)
    if data[:2] not in _MAGIC:
        raise ImageParseError(0, f"unknown magic {data[:2]!r}; expected P2, P3, P5 or P6")
    channels, binary = _MAGIC[data[:2]]
    hdr.pos = 2
    width = hdr.integer("width", 1, 1 << 30)
    height = hdr.integer("height", 1, 1 << 30)
    maxval = hdr.integer("maxval", 1, 65535)
    count = width * height * channels
    if binary:
        if hdr.pos >= len(data) or not data[hdr.pos : hdr.pos + 1].isspace():
            raise ImageParseError(hdr.pos, "expected a single whitespace byte after maxval")
        start = hdr.pos + 1
        dtype = ">u2" if maxval > 255 else "u1"
        nbytes = count * np.dtype(dtype).itemsize
        if len(data) - start < nbytes:
            raise ImageParseError(len(data), f"raster truncated: need {nbytes} bytes from offset {start}")
        raw = np.frombuffer(data, dtype=dtype, count=count, offset=start).astype(np.int64)
        over = np.flatnonzero(raw > maxval)
        if over.size:
            raise ImageParseError(start + int(over[0]) * np.dtype(dtype).itemsize, f"sample exceeds maxval {maxval}")
    else:
        raw = np.array([hdr.integer("sample", 0, maxval) for _ in range(count)], dtype=np.int64)
    img = raw.reshape(height, width, channels).transpose(2, 0, 1)
    return img.astype(np.float64) / maxval


def read_image(path):
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def encode_pnm(x, maxval=255, plain=False):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise ShapeError(f"expected (1|3, H, W) or (H, W), got {x.shape}")
    if not 1 <= maxval <= 65535:
        raise ValueError(f"maxval must lie in [1, 65535], got {maxval}")
    c, h, w = x.shape
    q = np.rint(np.clip(x, 0.0, 1.0) * maxval).astype(np.int64).transpose(1, 2, 0)
    magic = {(1, True): "P2", (3, True): "P3", (1, False): "P5", (3, False): "P6"}[(c, plain)]
    head = f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii")
    if plain:
        rows = [" ".join(str(v) for v in row.ravel()) for row in q]
        return head + ("\n".join(rows) + "\n").encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    return head + q.astype(dtype).tobytes()


def write_image(x, path, maxval=255, plain=False):
    with open(path, "wb") as fh:
        fh.write(encode_pnm(x, maxval=maxval, plain=plain))


def image_suffix(x):
    return ".pgm" if np.asarray(x).reshape(-1, *np.shape(x)[-2:]).shape[0] == 1 else ".ppm"
