"""Model dimensions, the named parameter table and the checkpoint format."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor

_GRU_WEIGHTS = ("W", "Wr", "Wz", "U", "Ur", "Uz")
_GRU_BIASES = ("b", "br", "bz")


@dataclass(frozen=True)
class Dims:
    src_vocab: int
    tgt_vocab: int
    embed: int = 620
    hidden: int = 1000
    att: int = 1000
    img_dim: int = 1024       # ResNet-50 res4f_relu channels
    n_regions: int = 196      # 14 x 14 spatial grid

    @property
    def ann(self) -> int:
        return 2 * self.hidden

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ValueError(f"dimension {k} must be positive, got {v}")


def _gru_table(prefix: str, d_in: int, d_h: int):
    for w in ("W", "Wr", "Wz"):
        yield f"{prefix}.{w}", (d_h, d_in), "weight"
    for w in ("U", "Ur", "Uz"):
        yield f"{prefix}.{w}", (d_h, d_h), "weight"
    for b in _GRU_BIASES:
        yield f"{prefix}.{b}", (d_h,), "bias"


def param_table(dims: Dims, multimodal: bool = True):
    """Ordered ``(name, shape, kind)`` rows for every learnable tensor."""
    e, h, a, d = dims.embed, dims.hidden, dims.att, dims.ann
    rows = [("enc.src_emb", (dims.src_vocab, e), "weight")]
    rows += _gru_table("enc.fwd", e, h)
    rows += _gru_table("enc.bwd", e, h)
    if multimodal:
        rows += [("enc.img.W", (dims.img_dim, d), "weight"), ("enc.img.b", (d,), "bias")]
    rows += [("dec.init.W", (h, d), "weight"), ("dec.init.b", (h,), "bias"),
             ("dec.emb", (dims.tgt_vocab, e), "weight")]
    rows += _gru_table("dec.gru1", e, h)
    rows += [("att.U_att", (a,), "weight"), ("att.W_att", (a, h), "weight"),
             ("att.W_catt_txt", (a, d), "weight")]
    if multimodal:
        rows.append(("att.W_catt_img", (a, d), "weight"))
    rows += _gru_table("dec.gru2", d, h)
    rows += [("out.L_o", (dims.tgt_vocab, e), "weight"), ("out.L_s", (e, h), "weight"),
             ("out.L_c", (e, d), "weight")]
    return rows


class ModelParams:
    """Named, ordered collection of parameter tensors plus the dims they follow."""

    def __init__(self, dims: Dims, tensors: "OrderedDict[str, Tensor]", multimodal: bool):
        self.dims = dims
        self.multimodal = multimodal
        table = param_table(dims, multimodal)
        expected = [n for n, _, _ in table]
        if list(tensors) != expected:
            missing = set(expected) ^ set(tensors)
            raise ValueError(f"parameter names do not match the table: {sorted(missing)}")
        for name, shape, _ in table:
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        self.kinds = {n: k for n, _, k in table}
        self.tensors = tensors

    @classmethod
    def from_arrays(cls, dims: Dims, arrays: dict, multimodal: bool) -> "ModelParams":
        order = [n for n, _, _ in param_table(dims, multimodal)]
        return cls(dims, OrderedDict((n, Tensor(arrays[n], requires_grad=True, name=n)) for n in order),
                   multimodal)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def weights(self):
        return [(n, t) for n, t in self.tensors.items() if self.kinds[n] == "weight"]

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data) for n, t in self.tensors.items())

    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def replace(self, updates: dict) -> "ModelParams":
        """New ModelParams with some tensors swapped for fresh leaves."""
        arrays = self.arrays()
        arrays.update(updates)
        return ModelParams.from_arrays(self.dims, arrays, self.multimodal)

    def with_tensors(self, tensors: dict) -> "ModelParams":
        """Swap in the given tensors as-is, e.g. probe leaves for a gradient check."""
        merged = OrderedDict(self.tensors)
        for name, t in tensors.items():
            if name not in merged:
                raise KeyError(name)
            merged[name] = t
        return ModelParams(self.dims, merged, self.multimodal)

    def copy(self) -> "ModelParams":
        return self.replace({})

    def monomodal(self) -> "ModelParams":
        """Drop the image branch; shared tensors are reused as-is."""
        names = [n for n, _, _ in param_table(self.dims, False)]
        return ModelParams(self.dims, OrderedDict((n, self.tensors[n]) for n in names), False)


MAGIC = b"MMNMTCKP"
FORMAT_VERSION = 1


def write_tensor_file(path, arrays: "OrderedDict[str, np.ndarray]", meta: dict) -> None:
    """Ordered (name, shape, float64 payload) records behind a magic header.

    Layout (little-endian): magic, u32 version, u32 metadata length, UTF-8
    JSON metadata, u32 record count, then per record u32 name length, name,
    u32 ndim, u64 extents, float64 payload.
    """
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensor_file(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    version, meta_len = struct.unpack_from("<II", raw, pos)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos += 8
    meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays: OrderedDict = OrderedDict()
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return arrays, meta


def save_checkpoint(path, params: ModelParams, extra: Optional[dict] = None) -> None:
    meta = {"dims": asdict(params.dims), "multimodal": params.multimodal}
    if extra:
        meta["train"] = extra
    write_tensor_file(path, params.arrays(), meta)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    arrays, meta = read_tensor_file(path)
    dims = Dims(**meta["dims"])
    return ModelParams.from_arrays(dims, arrays, bool(meta["multimodal"])), meta
