"""Image and curve file formats.

Images are either plain text (``P-TXT W H`` header followed by ``W*H``
whitespace-separated reals, row-major) or binary 16-bit PGM for integer
counts. Reals are written with 17 significant digits, which round-trips
IEEE doubles exactly.
"""

from __future__ import annotations

import csv
import os

import numpy as np

from .core import DomainError
from .metrics import ESTIMATOR_FIELDS, ORACLE_FIELDS, RiskCurve

__all__ = [
    "fmt",
    "save_text_image",
    "load_text_image",
    "save_pgm",
    "load_pgm",
    "save_image",
    "load_image",
    "write_curve_csv",
    "read_curve_csv",
]

TEXT_MAGIC = "P-TXT"


def fmt(value):
    return format(float(value), ".17g")


def save_text_image(path, image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 1:
        image = image[None, :]
    if image.ndim != 2:
        raise DomainError("only 2-D images can be saved")
    h, w = image.shape
    lines = [f"{TEXT_MAGIC} {w} {h}"]
    lines += [" ".join(fmt(v) for v in row) for row in image]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_text_image(path):
    with open(path, encoding="ascii") as fh:
        tokens = fh.read().split()
    if len(tokens) < 3 or tokens[0] != TEXT_MAGIC:
        raise DomainError(f"{path}: not a {TEXT_MAGIC} file")
    w, h = int(tokens[1]), int(tokens[2])
    values = tokens[3:]
    if len(values) != w * h:
        raise DomainError(f"{path}: expected {w * h} values, found {len(values)}")
    return np.array([float(v) for v in values], dtype=np.float64).reshape(h, w)


def save_pgm(path, image):
    """Binary 16-bit PGM (big-endian samples); integers in [0, 65535] only."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DomainError("only 2-D images can be saved")
    if np.any(image != np.round(image)) or image.min() < 0 or image.max() > 65535:
        raise DomainError("PGM holds integer counts in [0, 65535] only")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(image.astype(">u2").tobytes())


def _pgm_header(buf):
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DomainError("truncated PGM header")
        fields.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return fields, pos + 1


def load_pgm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    (magic, w, h, maxval), offset = _pgm_header(buf)
    if magic != b"P5":
        raise DomainError(f"{path}: not a binary PGM")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    raster = np.frombuffer(buf, dtype=dtype, count=w * h, offset=offset)
    return raster.reshape(h, w).astype(np.float64)


def save_image(path, image):
    """Write by extension: ``.pgm`` as 16-bit PGM, anything else as P-TXT."""
    if str(path).lower().endswith(".pgm"):
        save_pgm(path, image)
    else:
        save_text_image(path, image)


def load_image(path):
    """Read a P-TXT or PGM image, detected from the file's magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(5)
    if head.startswith(b"P5"):
        return load_pgm(path)
    if head == TEXT_MAGIC.encode():
        return load_text_image(path)
    raise DomainError(f"{os.fspath(path)}: unrecognized image format")


def write_curve_csv(path, curve):
    names = curve.fields
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("k",) + names)
        cols = [curve.column(n) for n in names]
        for i, k in enumerate(curve.k):
            writer.writerow([int(k)] + [fmt(c[i]) for c in cols])


def _infer_m(d_kl, pdp):
    """Recover ``M`` from ``pdp = |d_kl - M/2|``; the first row gives two candidates."""
    if d_kl.size:
        for half in (d_kl[0] + pdp[0], d_kl[0] - pdp[0]):
            if half > 0 and np.allclose(np.abs(d_kl - half), pdp, rtol=1e-9, atol=1e-9 * half):
                return int(round(2 * half))
    raise DomainError("cannot infer the data size M from the d_kl and pdp columns")


def read_curve_csv(path, m=None):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = tuple(rows[0])
    expected = ("k",) + ESTIMATOR_FIELDS
    if header not in (expected, expected + ORACLE_FIELDS):
        raise DomainError(f"{path}: unexpected header {','.join(header)}")
    body = rows[1:]
    cols = {name: [r[j] for r in body] for j, name in enumerate(header)}
    data = {name: np.array([float(v) for v in vals]) for name, vals in cols.items() if name != "k"}
    k = np.array([int(v) for v in cols["k"]], dtype=np.int64)
    if m is None:
        m = _infer_m(data["d_kl"], data["pdp"])
    return RiskCurve(k=k, m=m, **data)
