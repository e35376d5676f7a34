"""Byte-exact file formats: NPY v1.0 tensors and binary PGM masks.

The NPY subset is deliberately narrow -- version 1.0, little-endian float32
or float64 payloads, C order -- so real backbone features exported from any
ecosystem round-trip without converters, and anything else fails loudly
with a distinct error type.
"""

import ast
import struct

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    ValidationError,
)
from .tensorkit import Tensor

_NPY_MAGIC = b"\x93NUMPY"
_DESCR_TO_DTYPE = {"<f4": np.float32, "<f8": np.float64}
_DTYPE_TO_DESCR = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}


def read_npy(path):
    """Read an NPY v1.0 file into a Tensor. Floats only, C order only."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:6] != _NPY_MAGIC:
        raise BadMagicError(f"{path}: not an NPY file")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise FormatError(f"{path}: unsupported NPY version {major}.{minor}")
    (header_len,) = struct.unpack("<H", raw[8:10])
    if len(raw) < 10 + header_len:
        raise TruncatedPayloadError(f"{path}: header truncated")
    try:
        header = ast.literal_eval(raw[10:10 + header_len].decode("ascii"))
    except (ValueError, SyntaxError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed NPY header: {exc}") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise FormatError(f"{path}: NPY header must have descr/fortran_order/shape")
    descr = header["descr"]
    if descr not in _DESCR_TO_DTYPE:
        raise UnsupportedDtypeError(
            f"{path}: unsupported dtype {descr!r}; only little-endian <f4/<f8 accepted")
    if header["fortran_order"]:
        raise FormatError(f"{path}: fortran_order payloads not accepted")
    shape = tuple(header["shape"])
    if not all(isinstance(s, int) and s >= 1 for s in shape):
        raise FormatError(f"{path}: bad shape {shape}")
    dtype = np.dtype(_DESCR_TO_DTYPE[descr])
    count = int(np.prod(shape)) if shape else 1
    payload = raw[10 + header_len:]
    if len(payload) < count * dtype.itemsize:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, need {count * dtype.itemsize}")
    data = np.frombuffer(payload[:count * dtype.itemsize], dtype=dtype).reshape(shape)
    return Tensor(data.copy())


def write_npy(path, t):
    """Write a Tensor (or float ndarray) as NPY v1.0, header padded to 64 bytes."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in _DTYPE_TO_DESCR:
        raise ValidationError(f"write_npy: unsupported dtype {arr.dtype}")
    descr = _DTYPE_TO_DESCR[arr.dtype]
    shape = arr.shape if arr.ndim else (1,)
    header = ("{'descr': '%s', 'fortran_order': False, 'shape': %s, }"
              % (descr, repr(tuple(shape))))
    base = len(_NPY_MAGIC) + 2 + 2 + len(header) + 1
    pad = (64 - base % 64) % 64
    header = header + " " * pad + "\n"
    with open(path, "wb") as fh:
        fh.write(_NPY_MAGIC)
        fh.write(bytes([1, 0]))
        fh.write(struct.pack("<H", len(header)))
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(arr).reshape(shape).tobytes())


def read_pgm(path):
    """Read a binary (P5, maxval <= 255) PGM into a bool mask, threshold > 127."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P5":
        raise BadMagicError(f"{path}: not a binary PGM (P5) file")

    # header tokens may be separated by whitespace and '#' comments
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval

    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric PGM header") from exc
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad PGM dimensions {width}x{height}")
    if maxval > 255 or maxval < 1:
        raise FormatError(f"{path}: PGM maxval {maxval} out of range (1..255)")
    payload = raw[pos:pos + width * height]
    if len(payload) < width * height:
        raise TruncatedPayloadError(f"{path}: PGM payload truncated")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return pixels > 127


def write_pgm(path, mask):
    """Write a bool/0-1 mask as binary PGM, foreground = 255."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValidationError(f"write_pgm: mask must be 2-d, got {m.shape}")
    if m.dtype != np.bool_:
        vals = np.unique(m)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValidationError("write_pgm: mask values must be 0/1")
        m = m.astype(bool)
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((m.astype(np.uint8) * 255).tobytes())
