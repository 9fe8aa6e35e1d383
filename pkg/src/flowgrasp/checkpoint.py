"""Versioned binary checkpoint container shared by all estimators.

Layout (little-endian, documented in docs/formats.md):

    magic "FGCKPT01" | u32 version | u64 payload_len | u32 crc32(payload) | payload

    payload:
        u64 config_len | canonical JSON config
        u8 has_basis | u64 basis_len | basis block
        u32 n_tensors
        per tensor: u16 name_len | name | u8 dtype | u8 ndim | u64*ndim shape | data

The JSON config carries the estimator kind, its constructor parameters and
any fitted scalar attributes; tensors are the model state dict in declared
order, bit-exact float64.
"""

import json
import struct
import zlib
from collections import OrderedDict

import numpy as np
import torch

from .errors import SerializationError
from .pointcloud import basis_from_bytes, basis_to_bytes

MAGIC = b"FGCKPT01"
VERSION = 1

_DTYPES = {0: torch.float64, 1: torch.int64, 2: torch.bool}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}
_NP_DTYPES = {0: "<f8", 1: "<i8", 2: "|b1"}

_KINDS = {}


def register_kind(kind, cls):
    _KINDS[kind] = cls


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack_tensors(state):
    out = [struct.pack("<I", len(state))]
    for name, t in state.items():
        t = t.detach().contiguous()
        if t.dtype not in _DTYPE_CODES:
            raise SerializationError(f"unsupported tensor dtype {t.dtype} for {name!r}")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BB", _DTYPE_CODES[t.dtype], t.ndim))
        out.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        out.append(t.numpy().tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise SerializationError(f"truncated payload while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))


def _unpack_tensors(r: _Reader):
    (n,) = r.unpack("I", "tensor count")
    state = OrderedDict()
    for _ in range(n):
        (name_len,) = r.unpack("H", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        dtype_code, ndim = r.unpack("BB", "tensor header")
        if dtype_code not in _DTYPES:
            raise SerializationError(f"unknown tensor dtype code {dtype_code}")
        shape = r.unpack(f"{ndim}Q", "tensor shape") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        itemsize = np.dtype(_NP_DTYPES[dtype_code]).itemsize
        raw = r.take(count * itemsize, f"tensor {name!r} data")
        arr = np.frombuffer(raw, dtype=_NP_DTYPES[dtype_code]).reshape(shape).copy()
        state[name] = torch.from_numpy(arr).to(_DTYPES[dtype_code])
    return state


def save_model(estimator, path) -> None:
    """Write an estimator (fitted or not) to a checkpoint file."""
    config = {
        "kind": estimator.checkpoint_kind,
        "params": estimator.get_params(),
        "extras": estimator._checkpoint_extras(),
    }
    cfg = canonical_json(config)
    basis = getattr(estimator, "basis_", None)
    basis_block = basis_to_bytes(basis) if basis is not None else b""
    net = getattr(estimator, "net_", None)
    tensors = _pack_tensors(net.state_dict()) if net is not None else _pack_tensors({})
    payload = b"".join([
        struct.pack("<Q", len(cfg)), cfg,
        struct.pack("<BQ", 1 if basis is not None else 0, len(basis_block)), basis_block,
        tensors,
    ])
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQI", VERSION, len(payload), zlib.crc32(payload)))
        f.write(payload)


def load_model(path):
    """Read a checkpoint and reconstruct the estimator, re-validating basics."""
    from . import evaluator as _evaluator  # noqa: F401  (registers kinds)
    from . import models as _models  # noqa: F401

    with open(path, "rb") as f:
        head = f.read(8)
        if head != MAGIC:
            raise SerializationError("not a checkpoint file (bad magic)")
        hdr = f.read(16)
        if len(hdr) != 16:
            raise SerializationError("truncated checkpoint header")
        version, payload_len, crc = struct.unpack("<IQI", hdr)
        if version != VERSION:
            raise SerializationError(f"unsupported checkpoint version {version}")
        payload = f.read(payload_len)
        if len(payload) != payload_len:
            raise SerializationError("truncated checkpoint payload")
        if f.read(1):
            raise SerializationError("trailing bytes after checkpoint payload")
    if zlib.crc32(payload) != crc:
        raise SerializationError("checkpoint payload checksum mismatch")

    r = _Reader(payload)
    (cfg_len,) = r.unpack("Q", "config length")
    try:
        config = json.loads(r.take(cfg_len, "config").decode("utf-8"))
    except ValueError as e:
        raise SerializationError(f"invalid checkpoint config: {e}") from e
    has_basis, basis_len = r.unpack("BQ", "basis header")
    basis = basis_from_bytes(r.take(basis_len, "basis")) if has_basis else None
    state = _unpack_tensors(r)
    if r.pos != len(payload):
        raise SerializationError("trailing bytes inside checkpoint payload")

    kind = config.get("kind")
    if kind not in _KINDS:
        raise SerializationError(f"unknown model kind {kind!r}")
    est = _KINDS[kind](**config["params"])
    est._restore(basis, config.get("extras", {}), state)
    return est
