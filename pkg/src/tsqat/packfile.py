"""Binary packed-model format.

Little-endian layout::

    magic    "QATF"
    u16      format version
    32 B     SHA-256 config digest
    u32 + B  JSON header (model config + resolved quantisation configuration)
    u8       layer count
    per layer:
        u8 + B   layer id
        u32 u32  fan_in, fan_out
        4 x      quant params record (weights, biases, inputs, outputs):
                 f64 scale, i32 zero_point, u8 bits, u8 scheme (0 SQ, 1 AQ, 255 float)
        u32 + B  weight payload   (bit-packed two's complement, LSB first; f64 if float)
        u32 + B  bias payload
    u16      float tensor count
    per tensor: u16 + B name, u8 ndim, u32 dims, f64 data
    u32      CRC-32 of every preceding byte
"""

from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .intinfer import PackedLinear, PackedModel
from .model import ModelConfig, QuantObject, qconfig_from_dict, qconfig_to_dict
from .quant import QuantParams, Scheme

MAGIC = b"QATF"
VERSION = 1
OBJECT_ORDER = (QuantObject.WEIGHTS, QuantObject.BIASES, QuantObject.INPUTS, QuantObject.OUTPUTS)
_SCHEME_CODE = {Scheme.SQ: 0, Scheme.AQ: 1}
_FLOAT_CODE = 255
_PARAMS = struct.Struct("<diBB")


class PackFormatError(ValueError):
    pass


class ChecksumError(PackFormatError):
    pass


class TruncatedError(PackFormatError):
    pass


class VersionError(PackFormatError):
    pass


def pack_bits(values: np.ndarray, bits: int) -> bytes:
    """Pack signed integers into ``bits``-wide two's-complement fields, LSB first."""
    v = np.asarray(values, dtype=np.int64).reshape(-1)
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if v.size and (v.min() < lo or v.max() > hi):
        raise PackFormatError(f"values do not fit in {bits} signed bits")
    u = (v & ((1 << bits) - 1)).astype(np.uint64)
    planes = ((u[:, None] >> np.arange(bits, dtype=np.uint64)) & 1).astype(np.uint8)
    return np.packbits(planes.reshape(-1), bitorder="little").tobytes()


def unpack_bits(data: bytes, bits: int, count: int) -> np.ndarray:
    if len(data) != math.ceil(count * bits / 8):
        raise PackFormatError(f"payload of {len(data)} B does not hold {count} x {bits}-bit values")
    flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=count * bits, bitorder="little")
    weights = np.left_shift(np.int64(1), np.arange(bits, dtype=np.int64))
    u = flat.reshape(count, bits).astype(np.int64) @ weights if count else np.zeros(0, np.int64)
    return np.where(u >= (1 << (bits - 1)), u - (1 << bits), u).astype(np.int64)


def payload_bytes(count: int, bits: int | None) -> int:
    return count * 8 if bits is None else math.ceil(count * bits / 8)


class _Reader:
    def __init__(self, data: bytes):
        self.buf = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError("packed model file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def blob(self, len_fmt: str = "I") -> bytes:
        (n,) = self.unpack(len_fmt)
        return self.take(n)


def _blob(data: bytes, len_fmt: str = "I") -> bytes:
    return struct.pack("<" + len_fmt, len(data)) + data


def _tensor_payload(ints, floats, p: QuantParams | None) -> bytes:
    if p is not None:
        return pack_bits(ints, p.bits)
    return np.ascontiguousarray(floats, dtype="<f8").tobytes()


def dumps(model: PackedModel) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<H", VERSION))
    if len(model.digest) != 32:
        raise PackFormatError("config digest must be 32 bytes")
    out.write(model.digest)
    header = {"model": asdict(model.config),
              "quant": qconfig_to_dict(model.qconfig) if model.qconfig else None}
    out.write(_blob(json.dumps(header, sort_keys=True).encode()))
    out.write(struct.pack("<B", len(model.layers)))
    for lid, layer in model.layers.items():
        out.write(_blob(lid.encode(), "B"))
        out.write(struct.pack("<II", layer.fan_in, layer.fan_out))
        for obj in OBJECT_ORDER:
            p = layer.params.get(obj)
            if p is None:
                out.write(_PARAMS.pack(0.0, 0, 0, _FLOAT_CODE))
            else:
                out.write(_PARAMS.pack(p.scale, p.zero_point, p.bits, _SCHEME_CODE[p.scheme]))
        pw, pb = layer.params.get(QuantObject.WEIGHTS), layer.params.get(QuantObject.BIASES)
        out.write(_blob(_tensor_payload(layer.weight_int, layer.weight_float, pw)))
        out.write(_blob(_tensor_payload(layer.bias_int, layer.bias_float, pb)))
    out.write(struct.pack("<H", len(model.floats)))
    for name, arr in model.floats.items():
        arr = np.asarray(arr, dtype="<f8")
        out.write(_blob(name.encode(), "H"))
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr).tobytes())
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def _read_tensor(r: _Reader, p: QuantParams | None, shape: tuple[int, ...]):
    data = r.blob()
    count = int(np.prod(shape))
    if p is not None:
        return unpack_bits(data, p.bits, count).reshape(shape), None
    if len(data) != count * 8:
        raise PackFormatError("float payload length does not match the tensor shape")
    return None, np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)


def loads(data: bytes) -> PackedModel:
    if len(data) < len(MAGIC) + 2 + 4:
        raise TruncatedError("packed model file is truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if data[:4] != MAGIC:
        raise PackFormatError("not a packed model file (bad magic)")
    if zlib.crc32(body) != crc:
        raise ChecksumError("checksum mismatch")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("H")
    if version != VERSION:
        raise VersionError(f"unsupported format version {version}")
    digest = r.take(32)
    header = json.loads(r.blob().decode())
    config = ModelConfig(**header["model"])
    qconfig = qconfig_from_dict(header["quant"]) if header["quant"] else None
    (n_layers,) = r.unpack("B")
    layers = {}
    for _ in range(n_layers):
        lid = r.blob("B").decode()
        fan_in, fan_out = r.unpack("II")
        params = {}
        for obj in OBJECT_ORDER:
            scale, zp, bits, code = r.unpack("diBB")
            params[obj] = None if code == _FLOAT_CODE else QuantParams(
                scale, zp, bits, Scheme.SQ if code == 0 else Scheme.AQ)
        w_int, w_float = _read_tensor(r, params[QuantObject.WEIGHTS], (fan_in, fan_out))
        b_int, b_float = _read_tensor(r, params[QuantObject.BIASES], (fan_out,))
        layers[lid] = PackedLinear(lid, fan_in, fan_out, params, w_int, b_int, w_float, b_float)
    (n_floats,) = r.unpack("H")
    floats = {}
    for _ in range(n_floats):
        name = r.blob("H").decode()
        (ndim,) = r.unpack("B")
        shape = r.unpack(f"{ndim}I") if ndim else ()
        count = int(np.prod(shape))
        floats[name] = np.frombuffer(r.take(count * 8), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(body):
        raise PackFormatError("trailing bytes after the float section")
    return PackedModel(config=config, qconfig=qconfig, layers=layers, floats=floats, digest=digest)


def save_packed(path, model: PackedModel) -> int:
    data = dumps(model)
    Path(path).write_bytes(data)
    return len(data)


def load_packed(path) -> PackedModel:
    return loads(Path(path).read_bytes())
