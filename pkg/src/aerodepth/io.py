"""Byte-exact readers and writers: PGM/PPM images, PFM float maps, checkpoints.

Image layout
------------
``read_image`` returns a float32 array in channel-major order (C x H x W):
one channel for P5, three (R, G, B) for P6, values scaled by 1/255.
``write_image`` accepts C x H x W or H x W and rounds ``value * 255``.

Float map layout (``Pf``)
-------------------------
=========  =====================================================
bytes      content
=========  =====================================================
header     ``Pf\\n<width> <height>\\n-1.0\\n`` (ASCII)
payload    width*height little-endian float32, bottom row first
=========  =====================================================

Checkpoint layout (all integers little-endian)
----------------------------------------------
=====================  =================================================
field                  encoding
=====================  =================================================
magic                  ``ADCK``
version                u32 (currently 1)
model config           u32 levels, base_channels, in_channels,
                       out_channels; u64 seed
tensor count           u32
tensor record          u32 name length, UTF-8 name, u32 rank,
                       u32 dims[rank], float32 data (row-major)
optimizer flag         u8 (0 absent, 1 present)
optimizer block        u64 step, u32 count, then ``count`` tensor records
                       named ``m.<param>`` / ``v.<param>``
=====================  =================================================
"""

from __future__ import annotations

import csv
import io as _stdio
import struct
from typing import Dict, Optional, Tuple

import numpy as np

from .model import Model, ModelConfig, conv_shapes
from .numcore import Tensor
from .optim import AdamState

MAGIC = b"ADCK"
VERSION = 1


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# portable anymap (P5 / P6, maxval 255)
# ---------------------------------------------------------------------------


def _read_header_tokens(buf: bytes, count: int) -> Tuple[list, int]:
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("malformed header: unexpected end of file")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the payload
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise FormatError("malformed header: missing separator before payload")
    return tokens, pos + 1


def decode_pnm(buf: bytes) -> np.ndarray:
    tokens, offset = _read_header_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"malformed header: unsupported magic {magic!r} (expected P5 or P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"malformed header: non-integer fields {tokens[1:]}") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"malformed header: bad size {width}x{height}")
    if maxval != 255:
        raise FormatError(f"malformed header: maxval {maxval} unsupported (only 255)")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = buf[offset : offset + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    pix = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return (pix.transpose(2, 0, 1).astype(np.float32)) / np.float32(255.0)


def encode_pnm(image: np.ndarray) -> bytes:
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"image must be H x W or C x H x W with C in (1, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    c, h, w = arr.shape
    pix = np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + pix.transpose(1, 2, 0).tobytes()


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def write_image(image: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(image))


def write_class_mask(mask: np.ndarray, path) -> None:
    """Persist an integer class mask as P5 with byte value = class * 50."""
    m = np.asarray(mask)
    if np.any(m < 0) or np.any(m > 5) or np.any(m != np.round(m)):
        raise ValueError("class mask must hold integers in 0..5")
    with open(path, "wb") as fh:
        h, w = m.shape
        fh.write(b"P5\n%d %d\n255\n" % (w, h) + (m.astype(np.uint8) * 50).tobytes())


def read_class_mask(path) -> np.ndarray:
    with open(path, "rb") as fh:
        pix = np.rint(decode_pnm(fh.read())[0] * 255.0)
    if np.any(pix % 50):
        raise FormatError("class mask bytes must be multiples of 50")
    return (pix / 50).astype(np.float32)


# ---------------------------------------------------------------------------
# portable float map (single channel, little-endian)
# ---------------------------------------------------------------------------


def encode_float_map(mask: np.ndarray) -> bytes:
    m = np.asarray(mask, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"float map must be 2-d, got shape {m.shape}")
    if np.any(np.isnan(m)):
        raise ValueError("float map contains NaN values")
    h, w = m.shape
    header = b"Pf\n%d %d\n-1.0\n" % (w, h)
    return header + np.ascontiguousarray(m[::-1]).astype("<f4").tobytes()


def decode_float_map(buf: bytes) -> np.ndarray:
    lines = []
    pos = 0
    for _ in range(3):
        end = buf.find(b"\n", pos)
        if end < 0:
            raise FormatError("malformed float map header")
        lines.append(buf[pos:end].strip())
        pos = end + 1
    if lines[0] != b"Pf":
        raise FormatError(f"unsupported float map type {lines[0]!r} (expected Pf)")
    try:
        w, h = (int(t) for t in lines[1].split())
        scale = float(lines[2])
    except ValueError:
        raise FormatError("malformed float map header") from None
    if scale > 0:
        raise FormatError("big-endian float maps (positive scale) are not supported")
    need = 4 * w * h
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    return data[::-1].astype(np.float32)


def read_float_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_float_map(fh.read())


def write_float_map(mask: np.ndarray, path) -> None:
    data = encode_float_map(mask)
    with open(path, "wb") as fh:
        fh.write(data)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    parts = [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def encode_checkpoint(model: Model, state: Optional[AdamState] = None) -> bytes:
    cfg = model.config
    out = [MAGIC, struct.pack("<I", VERSION),
           struct.pack("<4IQ", cfg.levels, cfg.base_channels, cfg.in_channels, cfg.out_channels, cfg.seed),
           struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        out.append(_pack_tensor(name, t.data))
    if state is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01")
        records = []
        for name in model.params:
            records.append(_pack_tensor(f"m.{name}", state.m[name]))
            records.append(_pack_tensor(f"v.{name}", state.v[name]))
        out.append(struct.pack("<QI", state.t, len(records)))
        out.extend(records)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self, index: int) -> Tuple[str, np.ndarray]:
        label = f"tensor record {index}"
        (nlen,) = self.unpack("<I", f"{label} name length")
        name = self.take(nlen, f"{label} name").decode("utf-8")
        label = f"tensor record {index} ({name})"
        (rank,) = self.unpack("<I", f"{label} rank")
        if rank > 4:
            raise FormatError(f"{label}: rank {rank} exceeds 4")
        dims = self.unpack(f"<{rank}I", f"{label} dims")
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(self.take(4 * count, f"{label} data"), dtype="<f4").reshape(dims)
        return name, data.astype(np.float32)


def decode_checkpoint(buf: bytes) -> Tuple[Model, Optional[AdamState]]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint: bad magic (expected ADCK)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    levels, base, cin, cout, seed = r.unpack("<4IQ", "model config")
    cfg = ModelConfig(levels=levels, base_channels=base, in_channels=cin, out_channels=cout, seed=seed)
    cfg.validate()
    expected = {}
    for name, shape in conv_shapes(cfg):
        expected[f"{name}.w"] = shape
        expected[f"{name}.b"] = (shape[0],)
    (count,) = r.unpack("<I", "tensor count")
    params: Dict[str, Tensor] = {}
    for i in range(count):
        name, data = r.tensor(i)
        if name not in expected:
            raise FormatError(f"tensor record {i} ({name}): not part of the configured model")
        if data.shape != expected[name]:
            raise FormatError(f"tensor record {i} ({name}): shape {data.shape} inconsistent with config "
                              f"(expected {expected[name]})")
        params[name] = Tensor(data, requires_grad=True, name=name)
    missing = set(expected) - set(params)
    if missing:
        raise FormatError(f"checkpoint lacks tensors: {sorted(missing)}")
    ordered = {name: params[name] for name in expected}
    if list(params) != list(ordered):
        raise FormatError("tensor records are not in canonical order")
    (flag,) = r.unpack("<B", "optimizer flag")
    state = None
    if flag == 1:
        step, nrec = r.unpack("<QI", "optimizer header")
        m, v = {}, {}
        for i in range(nrec):
            name, data = r.tensor(count + i)
            kind, _, pname = name.partition(".")
            if pname not in params or kind not in ("m", "v") or data.shape != params[pname].shape:
                raise FormatError(f"optimizer record {i} ({name}): does not match a model parameter")
            (m if kind == "m" else v)[pname] = data
        state = AdamState(m=m, v=v, t=step)
    elif flag != 0:
        raise FormatError(f"bad optimizer flag {flag}")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return Model(cfg, ordered), state


def save_checkpoint(model: Model, path, state: Optional[AdamState] = None) -> None:
    data = encode_checkpoint(model, state)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> Tuple[Model, Optional[AdamState]]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# metric reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("mae", "rmse", "sw_mean", "sw_min", "sw_max", "thr_acc", "n")


def report_csv(report) -> str:
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    writer.writerow([repr(float(report.mae)), repr(float(report.rmse)), repr(float(report.sw_acc_mean)),
                     repr(float(report.sw_acc_min)), repr(float(report.sw_acc_max)),
                     repr(float(report.threshold_acc)), str(int(report.n_samples))])
    return buf.getvalue()


def write_report(report, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report_csv(report))


def read_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) != 2 or tuple(rows[0]) != REPORT_COLUMNS:
        raise FormatError(f"report must have header {','.join(REPORT_COLUMNS)} and one row")
    values = {k: float(v) for k, v in zip(rows[0], rows[1])}
    values["n"] = int(rows[1][-1])
    return values
