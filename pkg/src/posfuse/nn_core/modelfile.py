"""Binary model file (``PFMB``), little-endian.

::

    b"PFMB" u16 version u8 mode u8 loss u16 n_anchors u16 n_trunks u16 n_heads
    per network (trunks, then heads in anchor order):
        u16 n_widths, u32[n_widths] layer widths, f32 dropout, u32 anchor id (heads only)
    per network, same order: f32[n_params] parameters
    u8 has_optimizer
        if 1, per network: u32 step, f64 lr, f64 beta1, f64 beta2, f64 eps, f32[n] m, f32[n] v
    u32 n_meta, utf-8 JSON metadata (may be empty)
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError
from .adam import AdamState
from .network import Head, Trunk

MAGIC = b"PFMB"
VERSION = 1
MODES = ("early", "stl", "mtl")
LOSSES = ("mse", "nll")
_HEADER = struct.Struct("<4sHBBHHH")
_OPT = struct.Struct("<Idddd")


@dataclass
class ModelFile:
    mode: str
    loss: str
    n_anchors: int
    trunks: list[Trunk]
    heads: list[Head]
    optimizer: list[AdamState] | None = None
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_HEADER.pack(MAGIC, VERSION, MODES.index(self.mode), LOSSES.index(self.loss),
                               self.n_anchors, len(self.trunks), len(self.heads)))
        nets = [*self.trunks, *self.heads]
        for net in nets:
            buf.write(struct.pack("<H", len(net.sizes)))
            buf.write(np.asarray(net.sizes, dtype="<u4").tobytes())
            buf.write(struct.pack("<f", net.dropout))
            if isinstance(net, Head):
                buf.write(struct.pack("<I", net.anchor_id))
        for net in nets:
            buf.write(net.params.astype("<f4").tobytes())
        if self.optimizer is None:
            buf.write(b"\x00")
        else:
            if len(self.optimizer) != len(nets):
                raise DataError("one optimiser state per network required")
            buf.write(b"\x01")
            for st in self.optimizer:
                buf.write(_OPT.pack(st.step, st.lr, st.beta1, st.beta2, st.eps))
                buf.write(st.m.astype("<f4").tobytes())
                buf.write(st.v.astype("<f4").tobytes())
        meta = json.dumps(self.meta, sort_keys=True).encode() if self.meta else b""
        buf.write(struct.pack("<I", len(meta)))
        buf.write(meta)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> ModelFile:
        if data[:4] != MAGIC:
            raise DataError("not a PFMB model file")
        try:
            _, version, mode, loss, n_anchors, n_trunks, n_heads = _HEADER.unpack_from(data, 0)
            if version != VERSION:
                raise DataError(f"unsupported model file version {version}")
            off = _HEADER.size
            specs = []
            for k in range(n_trunks + n_heads):
                (n_w,) = struct.unpack_from("<H", data, off)
                off += 2
                sizes = np.frombuffer(data, dtype="<u4", count=n_w, offset=off).tolist()
                off += 4 * n_w
                (dropout,) = struct.unpack_from("<f", data, off)
                off += 4
                anchor = None
                if k >= n_trunks:
                    (anchor,) = struct.unpack_from("<I", data, off)
                    off += 4
                # dropout is stored as f32; 7 significant digits recover the configured value
                specs.append((sizes, float(f"{dropout:.7g}"), anchor))
            nets = []
            for sizes, dropout, anchor in specs:
                net = Trunk(sizes, dropout) if anchor is None else Head(sizes, dropout, anchor_id=anchor)
                net.params[...] = np.frombuffer(data, dtype="<f4", count=net.n_params, offset=off)
                off += 4 * net.n_params
                nets.append(net)
            optimizer = None
            has_opt = data[off]
            off += 1
            if has_opt:
                optimizer = []
                for net in nets:
                    step, lr, b1, b2, eps = _OPT.unpack_from(data, off)
                    off += _OPT.size
                    m = np.frombuffer(data, dtype="<f4", count=net.n_params, offset=off).astype(np.float32)
                    off += 4 * net.n_params
                    v = np.frombuffer(data, dtype="<f4", count=net.n_params, offset=off).astype(np.float32)
                    off += 4 * net.n_params
                    optimizer.append(AdamState(m, v, step, lr, b1, b2, eps))
            (n_meta,) = struct.unpack_from("<I", data, off)
            off += 4
            meta = json.loads(data[off:off + n_meta]) if n_meta else {}
            off += n_meta
        except (struct.error, ValueError, IndexError) as exc:
            raise DataError(f"truncated or corrupt model file: {exc}") from exc
        if off != len(data):
            raise DataError("trailing bytes after model file")
        return cls(MODES[mode], LOSSES[loss], n_anchors, nets[:n_trunks], nets[n_trunks:], optimizer, meta)
