"""Conditional two-layer GRU decoder with shared text/image attention.

One decoding step:

1. ``step1``: GRU over the previous target embedding gives ``s'``.
2. ``attend``: scores ``U_att . tanh(W_catt_mod h_i + W_att s')`` per
   modality, softmax within each modality, context
   ``c = tanh(sum alpha_i h_txt_i + sum beta_i h_img_i)``.
3. ``step2``: GRU with ``c`` as input and ``s'`` as recurrent state gives ``s``.
4. ``output_logprobs``: ``log softmax(L_o tanh(E[y_prev] + L_s s + L_c c))``.

``U_att`` and ``W_att`` are shared by both modalities; ``W_catt`` is
per-modality. The monomodal decoder is the same code with the image terms
dropped. All tensors are batched by row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .encoder import EncoderOutput, GruCellParams, gru_cell
from .model import ModelParams
from .tensor import Tensor


@dataclass
class StepOutput:
    s_prime: Tensor
    s_new: Tensor
    c: Tensor
    alpha: Tensor
    beta: Optional[Tensor]
    log_probs: Tensor


@dataclass
class AttentionKeys:
    """Annotation-side projections, constant across the steps of a sentence."""
    txt: Tensor                 # [B, N, a]
    img: Optional[Tensor] = None  # [B, R, a]


def _ids(y) -> np.ndarray:
    return np.atleast_1d(np.asarray(y, dtype=np.int64))


def embed_targets(y_prev, p: ModelParams) -> Tensor:
    return T.take_rows(p["dec.emb"], _ids(y_prev))


def initial_state(enc: EncoderOutput, p: ModelParams) -> Tensor:
    """``tanh(W_init . mean(h_txt) + b_init)``, mean over unmasked positions."""
    m = enc.src_mask
    weights = Tensor(m / m.sum(axis=1, keepdims=True))
    mean = T.weighted_sum(weights, enc.h_txt)
    return T.tanh(T.add(T.linear(mean, p["dec.init.W"]), p["dec.init.b"]))


def step1(y_prev, s_prev: Tensor, p: ModelParams, emb: Optional[Tensor] = None) -> Tensor:
    if emb is None:
        emb = embed_targets(y_prev, p)
    return gru_cell(emb, s_prev, GruCellParams.from_params(p, "dec.gru1"))


def attention_keys(enc: EncoderOutput, p: ModelParams, multimodal: bool) -> AttentionKeys:
    txt = T.linear(enc.h_txt, p["att.W_catt_txt"])
    img = None
    if multimodal:
        if enc.h_img is None:
            raise ValueError("multimodal attention needs image annotations")
        img = T.linear(enc.h_img, p["att.W_catt_img"])
    return AttentionKeys(txt, img)


def _scores(keys: Tensor, query: Tensor, u_att: Tensor) -> Tensor:
    return T.linear(T.tanh(T.add(keys, T.expand(query, keys.shape[1]))), u_att)


def attend(enc: EncoderOutput, s_prime: Tensor, p: ModelParams, multimodal: bool,
           keys: Optional[AttentionKeys] = None):
    """Return ``(alpha, beta, c)``; ``beta`` is None for the monomodal decoder."""
    if multimodal and enc.h_img is None:
        raise ValueError("multimodal attention needs image annotations")
    if keys is None:
        keys = attention_keys(enc, p, multimodal)
    query = T.linear(s_prime, p["att.W_att"])
    alpha = T.masked_softmax(_scores(keys.txt, query, p["att.U_att"]), enc.src_mask)
    ctx = T.weighted_sum(alpha, enc.h_txt)
    beta = None
    if multimodal:
        beta = T.softmax(_scores(keys.img, query, p["att.U_att"]))
        ctx = T.add(ctx, T.weighted_sum(beta, enc.h_img))
    return alpha, beta, T.tanh(ctx)


def step2(s_prime: Tensor, c: Tensor, p: ModelParams) -> Tensor:
    return gru_cell(c, s_prime, GruCellParams.from_params(p, "dec.gru2"))


def output_logprobs(y_prev, s: Tensor, c: Tensor, p: ModelParams,
                    emb: Optional[Tensor] = None) -> Tensor:
    if emb is None:
        emb = embed_targets(y_prev, p)
    hid = T.tanh(T.add(T.add(emb, T.linear(s, p["out.L_s"])), T.linear(c, p["out.L_c"])))
    return T.log_softmax(T.linear(hid, p["out.L_o"]))


def full_step(y_prev, s_prev: Tensor, enc: EncoderOutput, p: ModelParams, multimodal: bool,
              keys: Optional[AttentionKeys] = None) -> StepOutput:
    emb = embed_targets(y_prev, p)
    s_prime = step1(y_prev, s_prev, p, emb=emb)
    alpha, beta, c = attend(enc, s_prime, p, multimodal, keys)
    s_new = step2(s_prime, c, p)
    return StepOutput(s_prime, s_new, c, alpha, beta, output_logprobs(y_prev, s_new, c, p, emb=emb))


def teacher_forced_logprob(enc: EncoderOutput, tgt: np.ndarray, tgt_mask: np.ndarray,
                           p: ModelParams, multimodal: bool) -> Tensor:
    """Sum of ``log P(y_j | y_<j, x)`` over real target tokens of the batch.

    ``tgt`` is BOS/EOS framed; position 0 only ever acts as input.
    """
    tgt = np.asarray(tgt, dtype=np.int64)
    if tgt.ndim == 1:
        tgt = tgt[None, :]
    tgt_mask = np.asarray(tgt_mask, dtype=np.float64).reshape(tgt.shape)
    keys = attention_keys(enc, p, multimodal)
    s = initial_state(enc, p)
    total = None
    for j in range(1, tgt.shape[1]):
        m = tgt_mask[:, j]
        if not m.any():
            break
        out = full_step(tgt[:, j - 1], s, enc, p, multimodal, keys)
        term = T.sum(T.mul(T.pick(out.log_probs, tgt[:, j]), Tensor(m)))
        total = term if total is None else T.add(total, term)
        s = out.s_new
    if total is None:
        raise ValueError("target has no tokens after BOS")
    return total
