"""Left-to-right beam search, greedy decoding and multi-source selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import BOS, EOS, UNK, DataError, Vocabulary, normalize_tokenize, read_features, read_lines
from .decoder import AttentionKeys, attention_keys, full_step, initial_state
from .encoder import EncoderOutput, encode
from .model import ModelParams
from .tensor import NumericError, Tensor


@dataclass
class Hypothesis:
    tokens: list                 # BOS-rooted ids
    logprob: float = 0.0
    steps: list = field(default_factory=list)   # per-step log P increments
    state: Optional[np.ndarray] = None
    finished: bool = False

    @property
    def body(self) -> list:
        """Token ids without the BOS root and the trailing EOS."""
        end = -1 if self.finished else len(self.tokens)
        return self.tokens[1:end]

    @property
    def has_unk(self) -> bool:
        return UNK in self.tokens

    def score(self, length_norm: bool = False) -> float:
        if length_norm:
            return self.logprob / max(len(self.tokens) - 1, 1)
        return self.logprob


class _Stepper:
    """Runs decoder steps for a set of hypotheses sharing one encoding."""

    def __init__(self, params: ModelParams, enc: EncoderOutput, multimodal: bool):
        self.params = params
        self.enc = enc
        self.multimodal = multimodal
        self.keys = attention_keys(enc, params, multimodal)
        self._cache: dict = {}

    def _tiled(self, n: int):
        if n not in self._cache:
            enc = self.enc.repeat(n)
            keys = AttentionKeys(Tensor(np.repeat(self.keys.txt.data, n, axis=0)),
                                 None if self.keys.img is None else
                                 Tensor(np.repeat(self.keys.img.data, n, axis=0)))
            self._cache = {n: (enc, keys)}
        return self._cache[n]

    def initial_state(self) -> np.ndarray:
        return initial_state(self.enc, self.params).data[0]

    def __call__(self, last_tokens: Sequence[int], states: np.ndarray):
        enc, keys = self._tiled(len(last_tokens))
        out = full_step(np.asarray(last_tokens), Tensor(states), enc, self.params,
                        self.multimodal, keys)
        return out.log_probs.data, out.s_new.data


def _encode_one(params: ModelParams, src_ids, image, multimodal: bool) -> EncoderOutput:
    img = None if image is None else np.asarray(image)[None]
    return encode(params, np.asarray(src_ids)[None], None, img if multimodal else None, multimodal)


def greedy_decode(params: ModelParams, enc: EncoderOutput, multimodal: bool,
                  max_len: int = 80) -> Hypothesis:
    step = _Stepper(params, enc, multimodal)
    hyp = Hypothesis([BOS], 0.0, [], step.initial_state())
    for _ in range(max_len):
        logp, s = step([hyp.tokens[-1]], hyp.state[None])
        v = int(np.argmax(logp[0]))
        hyp = Hypothesis(hyp.tokens + [v], hyp.logprob + float(logp[0, v]),
                         hyp.steps + [float(logp[0, v])], s[0], v == EOS)
        if hyp.finished:
            break
    return hyp


def _top_candidates(live: list, scores: np.ndarray, k: int) -> list:
    """Best ``k`` (row, token) pairs by score; ties by lexicographic token ids."""
    flat = scores.reshape(-1)
    if k < flat.size:
        thresh = np.partition(flat, flat.size - k)[flat.size - k]
        idx = np.flatnonzero(flat >= thresh)
    else:
        idx = np.arange(flat.size)
    V = scores.shape[1]
    ranked = sorted(idx, key=lambda f: (-flat[f], live[f // V].tokens, f % V))
    return [(int(f // V), int(f % V)) for f in ranked[:k]]


def beam_search(params: ModelParams, enc: EncoderOutput, multimodal: bool, beam: int = 12,
                max_len: int = 80, return_pool: bool = False):
    """Classical beam search ranked by cumulative log-probability.

    Finished hypotheses move to a pool and shrink the live beam; search ends
    when the pool holds ``beam`` entries, every hypothesis has finished,
    ``max_len`` tokens were produced, or no live hypothesis can still beat
    the best finished one. Returns the best finished hypothesis, or the best
    unfinished one if nothing finished.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    step = _Stepper(params, enc, multimodal)
    live = [Hypothesis([BOS], 0.0, [], step.initial_state())]
    pool: list = []
    for _ in range(max_len):
        k = beam - len(pool)
        if k <= 0 or not live:
            break
        logp, states = step([h.tokens[-1] for h in live], np.stack([h.state for h in live]))
        if not np.isfinite(logp).all():
            raise NumericError("decoder produced non-finite log-probabilities")
        scores = np.array([h.logprob for h in live])[:, None] + logp
        nxt = []
        for row, v in _top_candidates(live, scores, k):
            h = live[row]
            inc = float(logp[row, v])
            cand = Hypothesis(h.tokens + [v], h.logprob + inc, h.steps + [inc], states[row], v == EOS)
            (pool if cand.finished else nxt).append(cand)
        live = nxt
        if pool and live and max(h.logprob for h in live) < max(h.logprob for h in pool):
            break
    ranked = sorted(pool or live, key=lambda h: (-h.logprob, h.tokens))
    return (ranked[0], ranked) if return_pool else ranked[0]


def decode_example(params: ModelParams, src_ids, image, multimodal: bool, beam: int = 12,
                   max_len: int = 80) -> Hypothesis:
    enc = _encode_one(params, src_ids, image, multimodal)
    if beam == 1:
        return greedy_decode(params, enc, multimodal, max_len)
    return beam_search(params, enc, multimodal, beam, max_len)


def select_candidate(candidates: Sequence[Hypothesis], length_norm: bool = False) -> int:
    """Index of the best candidate, preferring those without UNK.

    Among UNK-free candidates (or all of them, if every one has UNK) the
    highest cumulative log-probability wins; ties go to the earlier source.
    """
    if not candidates:
        raise ValueError("no candidates")
    clean = [i for i, c in enumerate(candidates) if not c.has_unk]
    pool = clean or list(range(len(candidates)))
    return max(pool, key=lambda i: (candidates[i].score(length_norm), -i))


def multi_source_select(params: ModelParams, sources: Sequence[Sequence[int]], image,
                        multimodal: bool, beam: int = 12, max_len: int = 80,
                        length_norm: bool = False) -> tuple[Hypothesis, int, list]:
    """Decode every source description independently and pick one output."""
    cands = [decode_example(params, src, image, multimodal, beam, max_len) for src in sources]
    best = select_candidate(cands, length_norm)
    return cands[best], best, cands


def _load_features(path, n_lines: int, params: ModelParams) -> np.ndarray:
    feats = read_features(path, params.dims.n_regions)
    if feats.shape[0] != n_lines:
        raise DataError(f"{path}: {feats.shape[0]} feature sets for {n_lines} input lines")
    return feats


def _write_meta(path, rows) -> None:
    lines = ["line\tlogprob\thas_unk\tfinished\tsource"]
    lines += [f"{i}\t{h.logprob:.6f}\t{int(h.has_unk)}\t{int(h.finished)}\t{src}" for i, h, src in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def translate_file(params: ModelParams, src_vocab: Vocabulary, tgt_vocab: Vocabulary, src_path,
                   out_path, feature_path=None, multimodal: bool = False, beam: int = 12,
                   max_len: int = 80, meta_path=None) -> list[str]:
    """Decode one sentence per input line; output tokens are space-joined."""
    lines = read_lines(src_path)
    feats = None
    if multimodal:
        if feature_path is None:
            raise DataError("multimodal translation needs a feature file")
        feats = _load_features(feature_path, len(lines), params)
    outputs, rows = [], []
    for i, line in enumerate(lines):
        ids = src_vocab.encode(normalize_tokenize(line))
        hyp = decode_example(params, ids, None if feats is None else feats[i], multimodal, beam, max_len)
        outputs.append(" ".join(tgt_vocab.decode(hyp.body)))
        rows.append((i, hyp, 0))
    Path(out_path).write_text("".join(o + "\n" for o in outputs), encoding="utf-8")
    if meta_path is not None:
        _write_meta(meta_path, rows)
    return outputs


def multisource_file(params: ModelParams, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                     src_paths: Sequence, out_path, feature_path=None, multimodal: bool = False,
                     beam: int = 12, max_len: int = 80, length_norm: bool = False,
                     meta_path=None) -> list[str]:
    """One output per image from several aligned source-description files."""
    columns = [read_lines(p) for p in src_paths]
    if not columns:
        raise DataError("at least one source file is required")
    n = len(columns[0])
    if any(len(c) != n for c in columns):
        raise DataError("source description files are not aligned")
    feats = None
    if multimodal:
        if feature_path is None:
            raise DataError("multimodal generation needs a feature file")
        feats = _load_features(feature_path, n, params)
    outputs, rows = [], []
    for i in range(n):
        sources = [src_vocab.encode(normalize_tokenize(col[i])) for col in columns]
        hyp, which, _ = multi_source_select(params, sources, None if feats is None else feats[i],
                                            multimodal, beam, max_len, length_norm)
        outputs.append(" ".join(tgt_vocab.decode(hyp.body)))
        rows.append((i, hyp, which))
    Path(out_path).write_text("".join(o + "\n" for o in outputs), encoding="utf-8")
    if meta_path is not None:
        _write_meta(meta_path, rows)
    return outputs
