"""Binary parameter files for trained transforms.

Layout (little endian)::

    "CMCT" | u32 version | u32 json_len | json header (UTF-8)
    u32 variant tag | u32 reduction | u32 num_nets | u32 has_query_net
    per net (gallery nets, then the query net): u32 in_dim | u32 out_dim | u32 has_weight_head | f32 params
    head: u32 num_classes | u32 dim | f32 weights

Parameters are written in a fixed key order, matrices row-major.  The JSON
header carries the training config and bookkeeping for provenance.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .loss import TrainConfig
from .net import NUM_BLOCKS, ClassifierHead, TransformNet
from .train import TrainedTransform, Variant

MAGIC = b"CMCT"
VERSION = 1
_VARIANT_TAGS = {v: i for i, v in enumerate(Variant)}
_U32 = struct.Struct("<I")


def _param_shapes(in_dim: int, out_dim: int, reduction: int, weight_head: bool) -> list[tuple[str, tuple]]:
    r = out_dim // reduction
    shapes = [("proj_w", (out_dim, in_dim)), ("proj_b", (out_dim,))]
    for k in range(NUM_BLOCKS):
        shapes += [(f"b{k}_rw", (r, out_dim)), (f"b{k}_rb", (r,)), (f"b{k}_ew", (out_dim, r)), (f"b{k}_eb", (out_dim,))]
    if weight_head:
        shapes += [("wh_w", (out_dim,)), ("wh_b", (1,))]
    return shapes


def encode_transform(tt: TrainedTransform) -> bytes:
    header = {
        "variant": tt.variant.value,
        "train_config": tt.cfg.to_dict(),
        "gallery_model_ids": list(tt.gallery_model_ids),
        "query_model_id": tt.query_model_id,
        "class_labels": [] if tt.class_labels is None else [int(c) for c in tt.class_labels],
        "head_scale": tt.head.scale,
        "loss_history": list(tt.loss_history),
    }
    hj = json.dumps(header, sort_keys=True).encode("utf-8")
    nets = list(tt.nets) + ([tt.query_net] if tt.query_net is not None else [])
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(hj)), hj,
             struct.pack("<IIII", _VARIANT_TAGS[tt.variant], nets[0].reduction, len(tt.nets), int(tt.query_net is not None))]
    for net in nets:
        parts.append(struct.pack("<III", net.in_dim, net.out_dim, int(net.has_weight_head)))
        for name, shape in _param_shapes(net.in_dim, net.out_dim, net.reduction, net.has_weight_head):
            parts.append(np.ascontiguousarray(net.params[name], dtype="<f4").tobytes())
    w = tt.head.weights
    parts.append(struct.pack("<II", *w.shape))
    parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated transform file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, k: int = 1):
        vals = struct.unpack(f"<{k}I", self.take(4 * k))
        return vals[0] if k == 1 else vals

    def f32(self, shape: tuple) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64).reshape(shape)


def decode_transform(data: bytes) -> TrainedTransform:
    rd = _Reader(data)
    if rd.take(4) != MAGIC:
        raise FormatError("not a transform parameter file (bad magic)")
    version = rd.u32()
    if version != VERSION:
        raise FormatError(f"unsupported transform file version {version}")
    try:
        header = json.loads(rd.take(rd.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("corrupt transform header") from exc
    tag, reduction, num_nets, has_q = rd.u32(4)
    variants = list(Variant)
    if tag >= len(variants):
        raise FormatError(f"unknown variant tag {tag}")
    nets = []
    for _ in range(num_nets + has_q):
        n, m, wh = rd.u32(3)
        params = {name: rd.f32(shape) for name, shape in _param_shapes(n, m, reduction, bool(wh))}
        nets.append(TransformNet(n, m, params, reduction))
    c, d = rd.u32(2)
    head = ClassifierHead(rd.f32((c, d)), header["head_scale"])
    if rd.pos != len(data):
        raise FormatError("trailing bytes in transform file")
    labels = header.get("class_labels") or None
    return TrainedTransform(
        variants[tag], nets[:num_nets], head, TrainConfig.from_dict(header["train_config"]),
        nets[num_nets] if has_q else None, list(header.get("loss_history", [])),
        list(header.get("gallery_model_ids", [])), header.get("query_model_id", ""),
        None if labels is None else np.asarray(labels, dtype=np.int64),
    )


def save_transform(tt: TrainedTransform, path) -> None:
    Path(path).write_bytes(encode_transform(tt))


def load_transform(path) -> TrainedTransform:
    return decode_transform(Path(path).read_bytes())
