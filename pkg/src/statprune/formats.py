"""On-disk formats.

``.stm`` (model) and ``.stc`` (calibration set) share one layout::

    magic (4 bytes) | header length (u32 LE) | UTF-8 JSON header | payload

The model payload is a sequence of little-endian float32 tensors, row-major,
at the offsets listed in the header's tensor table (offsets count from the
start of the payload). The calibration payload is ``m*b*n`` float32 values.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncatedFileError
from .model import AttentionLayer, Block, FfnLayer, TransformerModel

MODEL_MAGIC = b"STM1"
CALIB_MAGIC = b"STC1"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class CalibrationSet:
    inputs: np.ndarray  # (m, b, n)
    lengths: np.ndarray  # (m,)

    @property
    def m(self):
        return self.inputs.shape[0]

    @property
    def b(self):
        return self.inputs.shape[1]

    @property
    def n(self):
        return self.inputs.shape[2]

    def subset(self, count):
        return CalibrationSet(self.inputs[:count].copy(), self.lengths[:count].copy())


def _tensor_list(model: TransformerModel):
    out = []
    for l, blk in enumerate(model.layers):
        at, ff = blk.attention, blk.ffn
        p = f"layers.{l}."
        for nm in ("wq", "wk", "wv", "bq", "bk", "bv", "wo", "bo"):
            out.append((p + "attn." + nm, getattr(at, nm)))
        for nm in ("w1", "b1", "w2", "b2"):
            out.append((p + "ffn." + nm, getattr(ff, nm)))
        for nm in ("norm1_g", "norm1_b", "norm2_g", "norm2_b"):
            out.append((p + nm, getattr(blk, nm)))
    if model.head_w is not None:
        out.append(("head.w", model.head_w))
        out.append(("head.b", model.head_b))
    return out


def _pack(magic, header, payload_parts):
    hdr = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return b"".join([magic, struct.pack("<I", len(hdr)), hdr, *payload_parts])


def model_to_bytes(model: TransformerModel) -> bytes:
    model.validate()
    tensors, parts, offset = [], [], 0
    for name, arr in _tensor_list(model):
        raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset})
        parts.append(raw)
        offset += len(raw)
    header = {
        "version": FORMAT_VERSION,
        "n": model.n,
        "norm_placement": model.norm_placement,
        "norm_kind": model.norm_kind,
        "layers": [
            {"h": b.attention.h, "d_h": b.attention.d_h, "f": b.ffn.f, "activation": b.ffn.activation}
            for b in model.layers
        ],
        "classes": model.classes,
        "tensors": tensors,
    }
    return _pack(MODEL_MAGIC, header, parts)


def save_model(model: TransformerModel, path):
    Path(path).write_bytes(model_to_bytes(model))


def _unpack(data: bytes, magic: bytes, what: str):
    if len(data) < 8:
        raise TruncatedFileError(f"{what}: file is {len(data)} bytes, too short for a header")
    if data[:4] != magic:
        raise FormatError(f"{what}: bad magic {data[:4]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise TruncatedFileError(f"{what}: header claims {hlen} bytes but only {len(data) - 8} follow")
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{what}: header is not valid JSON ({e})") from None
    if not isinstance(header, dict):
        raise FormatError(f"{what}: header must be a JSON object")
    return header, memoryview(data)[8 + hlen:]


def _read_f32(payload, offset, shape, what):
    count = int(np.prod(shape, dtype=np.int64))
    end = offset + 4 * count
    if offset < 0 or end > len(payload):
        raise TruncatedFileError(
            f"{what}: tensor at offset {offset} needs {4 * count} bytes, payload has {len(payload)}"
        )
    arr = np.frombuffer(payload[offset:end], dtype=_F32).astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{what}: non-finite values")
    return arr


def model_from_bytes(data: bytes) -> TransformerModel:
    header, payload = _unpack(data, MODEL_MAGIC, "model")
    try:
        if header["version"] != FORMAT_VERSION:
            raise FormatError(f"model: unsupported version {header['version']!r}")
        n = int(header["n"])
        table = {t["name"]: t for t in header["tensors"]}
        layer_specs = header["layers"]
        placement, kind = header["norm_placement"], header["norm_kind"]
        classes = header.get("classes")
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"model: malformed header ({e!r})") from None

    def get(name, shape):
        t = table.get(name)
        if t is None:
            raise FormatError(f"model: tensor {name} missing from table")
        if t.get("dtype") != "f32":
            raise FormatError(f"model: tensor {name} has dtype {t.get('dtype')!r}, expected 'f32'")
        if list(t["shape"]) != list(shape):
            raise FormatError(f"model: tensor {name} has shape {t['shape']}, header implies {list(shape)}")
        return _read_f32(payload, int(t["offset"]), tuple(shape), f"model tensor {name}")

    layers = []
    for l, spec in enumerate(layer_specs):
        h, d, f = int(spec["h"]), int(spec["d_h"]), int(spec["f"])
        w = h * d
        p = f"layers.{l}."
        at = AttentionLayer(
            h=h, d_h=d,
            wq=get(p + "attn.wq", (n, w)), wk=get(p + "attn.wk", (n, w)), wv=get(p + "attn.wv", (n, w)),
            bq=get(p + "attn.bq", (w,)), bk=get(p + "attn.bk", (w,)), bv=get(p + "attn.bv", (w,)),
            wo=get(p + "attn.wo", (w, n)), bo=get(p + "attn.bo", (n,)),
        )
        ff = FfnLayer(
            w1=get(p + "ffn.w1", (n, f)), b1=get(p + "ffn.b1", (f,)),
            w2=get(p + "ffn.w2", (f, n)), b2=get(p + "ffn.b2", (n,)),
            activation=spec["activation"],
        )
        layers.append(Block(at, ff, *(get(p + nm, (n,)) for nm in ("norm1_g", "norm1_b", "norm2_g", "norm2_b"))))
    head_w = head_b = None
    if classes is not None:
        head_w, head_b = get("head.w", (n, int(classes))), get("head.b", (int(classes),))
    model = TransformerModel(n=n, layers=layers, norm_placement=placement, norm_kind=kind,
                             head_w=head_w, head_b=head_b)
    try:
        model.validate()
    except ValueError as e:
        raise FormatError(f"model: {e}") from None
    return model


def load_model(path) -> TransformerModel:
    return model_from_bytes(Path(path).read_bytes())


def calib_to_bytes(calib: CalibrationSet) -> bytes:
    _check_calib(calib.inputs, calib.lengths, ValueError)
    m, b, n = calib.inputs.shape
    header = {"m": m, "b": b, "n": n, "lengths": [int(x) for x in calib.lengths]}
    return _pack(CALIB_MAGIC, header, [np.ascontiguousarray(calib.inputs, dtype=_F32).tobytes()])


def save_calib(calib: CalibrationSet, path):
    Path(path).write_bytes(calib_to_bytes(calib))


def calib_from_bytes(data: bytes) -> CalibrationSet:
    header, payload = _unpack(data, CALIB_MAGIC, "calibration")
    try:
        m, b, n = int(header["m"]), int(header["b"]), int(header["n"])
        lengths = np.asarray(header["lengths"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"calibration: malformed header ({e!r})") from None
    if m < 1 or b < 1 or n < 1:
        raise FormatError(f"calibration: bad dimensions m={m} b={b} n={n}")
    inputs = _read_f32(payload, 0, (m, b, n), "calibration payload")
    _check_calib(inputs, lengths, FormatError)
    return CalibrationSet(inputs, lengths)


def _check_calib(inputs, lengths, exc):
    if inputs.ndim != 3:
        raise exc(f"calibration inputs must be (m, b, n), got {inputs.shape}")
    m, b, _ = inputs.shape
    if lengths.shape != (m,):
        raise exc(f"calibration: {lengths.shape[0] if lengths.ndim else 0} lengths for {m} examples")
    if np.any(lengths < 1) or np.any(lengths > b):
        raise exc(f"calibration: lengths must lie in [1, {b}]")
    if not np.all(np.isfinite(inputs)):
        raise exc("calibration: non-finite values")


def load_calib(path) -> CalibrationSet:
    return calib_from_bytes(Path(path).read_bytes())
