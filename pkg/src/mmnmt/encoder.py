"""Bidirectional GRU text encoder and the image-region projection.

All functions are batched: rows of every 2-d state are independent
sentences, and annotations are ``[B, positions, 2 * hidden]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .model import ModelParams
from .tensor import Tensor


@dataclass
class GruCellParams:
    W: Tensor
    Wr: Tensor
    Wz: Tensor
    U: Tensor
    Ur: Tensor
    Uz: Tensor
    b: Tensor
    br: Tensor
    bz: Tensor

    @classmethod
    def from_params(cls, params: ModelParams, prefix: str) -> "GruCellParams":
        return cls(**{k: params[f"{prefix}.{k}"] for k in cls.__dataclass_fields__})


def gru_cell(x: Tensor, h_prev: Tensor, p: GruCellParams) -> Tensor:
    if x.shape[-1] != p.W.shape[1] or h_prev.shape[-1] != p.U.shape[0]:
        raise T.ShapeError(f"gru_cell: input {x.shape} / state {h_prev.shape} "
                           f"do not fit W {p.W.shape}, U {p.U.shape}")
    r = T.sigmoid(T.add(T.add(T.linear(x, p.Wr), T.linear(h_prev, p.Ur)), p.br))
    z = T.sigmoid(T.add(T.add(T.linear(x, p.Wz), T.linear(h_prev, p.Uz)), p.bz))
    cand = T.tanh(T.add(T.add(T.linear(x, p.W), T.mul(r, T.linear(h_prev, p.U))), p.b))
    return T.add(T.mul(T.sub(1.0, z), cand), T.mul(z, h_prev))


@dataclass
class EncoderOutput:
    h_txt: Tensor                  # [B, N, D]
    src_mask: np.ndarray           # [B, N]
    h_img: Optional[Tensor] = None  # [B, R, D]

    @property
    def batch_size(self) -> int:
        return self.h_txt.shape[0]

    def repeat(self, k: int) -> "EncoderOutput":
        """Tile a single-sentence output ``k`` times (untracked; for decoding)."""
        if self.batch_size != 1:
            raise ValueError("repeat expects a single-sentence encoding")
        h_img = Tensor(np.repeat(self.h_img.data, k, axis=0)) if self.h_img is not None else None
        return EncoderOutput(Tensor(np.repeat(self.h_txt.data, k, axis=0)),
                             np.repeat(self.src_mask, k, axis=0), h_img)


def _masked_update(new: Tensor, old: Tensor, m: np.ndarray) -> Tensor:
    if m.all():
        return new
    keep = Tensor(np.broadcast_to(m[:, None], new.shape))
    return T.add(T.mul(keep, new), T.mul(Tensor(1.0 - keep.data), old))


def encode_text(src_ids, params: ModelParams, src_mask=None) -> Tensor:
    """Annotate each source position with ``[forward ; backward]`` GRU states.

    PAD positions leave the running state untouched in both directions, so
    annotations of real tokens do not depend on how much padding follows.
    """
    ids = np.asarray(src_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[1] == 0:
        raise ValueError("encode_text: empty source sequence")
    mask = np.ones(ids.shape) if src_mask is None else np.asarray(src_mask, dtype=np.float64).reshape(ids.shape)
    B, N = ids.shape
    emb = T.take_rows(params["enc.src_emb"], ids)
    hidden = params.dims.hidden
    fwd_p = GruCellParams.from_params(params, "enc.fwd")
    bwd_p = GruCellParams.from_params(params, "enc.bwd")

    xs = [T.select(emb, t, axis=1) for t in range(N)]
    h = Tensor(np.zeros((B, hidden)))
    fwd = []
    for t in range(N):
        h = _masked_update(gru_cell(xs[t], h, fwd_p), h, mask[:, t])
        fwd.append(h)
    h = Tensor(np.zeros((B, hidden)))
    bwd = [None] * N
    for t in reversed(range(N)):
        h = _masked_update(gru_cell(xs[t], h, bwd_p), h, mask[:, t])
        bwd[t] = h
    return T.concat([T.stack(fwd, axis=1), T.stack(bwd, axis=1)], axis=-1)


def project_image(features, W: Tensor, b: Tensor, n_regions: Optional[int] = None) -> Tensor:
    """``tanh(features @ W + b)`` row-wise over regions; returns ``[B, R, D]``."""
    feats = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[None]
    if feats.ndim != 3:
        raise T.ShapeError(f"project_image: expected [B, R, d] features, got {feats.shape}")
    B, R, d = feats.shape
    if n_regions is not None and R != n_regions:
        raise T.ShapeError(f"project_image: {R} regions, expected {n_regions}")
    if d != W.shape[0]:
        raise T.ShapeError(f"project_image: feature dim {d}, projection expects {W.shape[0]}")
    flat = T.matmul(Tensor(feats.reshape(B * R, d)), W)
    return T.reshape(T.tanh(T.add(flat, b)), (B, R, W.shape[1]))


def encode(params: ModelParams, src_ids, src_mask=None, image=None,
           multimodal: bool = False) -> EncoderOutput:
    ids = np.asarray(src_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    mask = np.ones(ids.shape) if src_mask is None else np.asarray(src_mask, dtype=np.float64).reshape(ids.shape)
    h_txt = encode_text(ids, params, mask)
    h_img = None
    if multimodal:
        if image is None:
            raise ValueError("multimodal encoding needs image features")
        if not params.multimodal:
            raise ValueError("parameters have no image branch")
        h_img = project_image(image, params["enc.img.W"], params["enc.img.b"], params.dims.n_regions)
        if h_img.shape[0] != ids.shape[0]:
            raise T.ShapeError(f"{h_img.shape[0]} feature sets for {ids.shape[0]} sentences")
    return EncoderOutput(h_txt, mask, h_img)
