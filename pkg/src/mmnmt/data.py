"""Corpus preparation: tokenization, vocabularies, length filtering, batching.

Also holds the on-disk formats shared by the CLI: plain-text corpora, vocab
files (one token per line, reserved ids implicit) and binary region-feature
files.
"""

from __future__ import annotations

import re
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
N_REGIONS = 196

# Table 1 / Table 4 vocabulary sizes, used as CLI defaults.
TASK1_SRC_CAP, TASK1_TGT_CAP = 10211, 15820
TASK2_SRC_CAP, TASK2_TGT_CAP = 16802, 10000


class DataError(ValueError):
    """Malformed or inconsistent input data."""


_PUNCT = re.compile(r"""([.,;:!?"'()])""")


def normalize_tokenize(line: str) -> list[str]:
    """Lowercase, split off punctuation, collapse whitespace.

    >>> normalize_tokenize("A man, smiling.")
    ['a', 'man', ',', 'smiling', '.']
    """
    return _PUNCT.sub(r" \1 ", line.lower()).split()


class Vocabulary:
    """Token/id map with ids 0-3 reserved for PAD, BOS, EOS and UNK."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + list(tokens)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("vocabulary tokens must be unique and distinct from reserved names")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self.itos[idx] if 0 <= idx < len(self.itos) else RESERVED[UNK]

    def encode(self, tokens: Iterable[str], frame: bool = True) -> list[int]:
        ids = [self.lookup(t) for t in tokens]
        return [BOS] + ids + [EOS] if frame else ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Map ids back to tokens, dropping PAD/BOS/EOS framing."""
        return [self.token_of(int(i)) for i in ids if int(i) not in (PAD, BOS, EOS)]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.split("\n") if line])


def build_vocab(corpus: Iterable[Sequence[str]], cap: int) -> Vocabulary:
    """Keep the ``cap`` most frequent tokens; ties go to the earlier first occurrence."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    counts: Counter = Counter()
    first: dict = {}
    for sent in corpus:
        for tok in sent:
            if tok not in first:
                first[tok] = len(first)
            counts[tok] += 1
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], first[t]))
    return Vocabulary([t for t in ranked if t not in RESERVED][:cap])


def keep_pair(src_len: int, tgt_len: int, min_len: int = 3, max_len: int = 50,
              max_ratio: float = 3.0) -> bool:
    if not (min_len <= src_len <= max_len and min_len <= tgt_len <= max_len):
        return False
    lo, hi = sorted((src_len, tgt_len))
    return hi <= max_ratio * lo


def filter_pairs(pairs: Iterable[tuple], min_len: int = 3, max_len: int = 50,
                 max_ratio: float = 3.0) -> list[tuple]:
    """Keep (src_tokens, tgt_tokens, ...) pairs whose lengths pass :func:`keep_pair`.

    Lengths are raw token counts, so call this before BOS/EOS framing.
    """
    return [p for p in pairs if keep_pair(len(p[0]), len(p[1]), min_len, max_len, max_ratio)]


@dataclass
class ParallelExample:
    src_ids: list
    tgt_ids: list
    image_features: Optional[np.ndarray] = None

    def __post_init__(self):
        for seq in (self.src_ids, self.tgt_ids):
            if len(seq) < 2 or seq[0] != BOS or seq[-1] != EOS or PAD in seq:
                raise DataError(f"sequence must be BOS/EOS framed without PAD: {seq}")
        if self.image_features is not None and self.image_features.ndim != 2:
            raise DataError("image features must be a [regions x dim] matrix")


@dataclass
class Batch:
    src: np.ndarray        # [B, Ns] int, PAD-filled tail
    src_len: np.ndarray    # [B]
    tgt: np.ndarray        # [B, Nt]
    tgt_len: np.ndarray
    src_mask: np.ndarray   # [B, Ns] float, 1 on real tokens
    tgt_mask: np.ndarray
    image: Optional[np.ndarray] = None  # [B, R, d]

    @property
    def size(self) -> int:
        return self.src.shape[0]


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lens.max())), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    mask = (np.arange(out.shape[1])[None, :] < lens[:, None]).astype(np.float64)
    return out, lens, mask


def collate(examples: Sequence[ParallelExample]) -> Batch:
    src, src_len, src_mask = _pad([e.src_ids for e in examples])
    tgt, tgt_len, tgt_mask = _pad([e.tgt_ids for e in examples])
    feats = [e.image_features for e in examples]
    image = None
    if all(f is not None for f in feats):
        image = np.stack(feats).astype(np.float64)
    elif any(f is not None for f in feats):
        raise DataError("either all or none of the batch examples carry image features")
    return Batch(src, src_len, tgt, tgt_len, src_mask, tgt_mask, image)


def make_batches(examples: Sequence[ParallelExample], batch_size: int = 32,
                 sort_by_src_len: bool = False, shuffle_seed: Optional[int] = None) -> list[Batch]:
    """Split ``examples`` into padded batches, each example exactly once.

    With a seed the example order is shuffled; with ``sort_by_src_len`` the
    (shuffled) examples are stably sorted by source length before chunking and
    the chunk order is shuffled again.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not examples:
        raise DataError("no examples to batch")
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    order = np.arange(len(examples))
    if rng is not None:
        order = rng.permutation(order)
    if sort_by_src_len:
        order = sorted(order, key=lambda i: len(examples[i].src_ids))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if sort_by_src_len and rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [collate([examples[i] for i in chunk]) for chunk in chunks]


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def read_parallel(src_path, tgt_path) -> list[tuple[list[str], list[str]]]:
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise DataError(f"misaligned corpora: {src_path} has {len(src)} lines, {tgt_path} has {len(tgt)}")
    return [(normalize_tokenize(s), normalize_tokenize(t)) for s, t in zip(src, tgt)]


def write_ids(path, seqs: Iterable[Sequence[int]]) -> None:
    Path(path).write_text("".join(" ".join(map(str, s)) + "\n" for s in seqs), encoding="utf-8")


def read_ids(path) -> list[list[int]]:
    return [[int(x) for x in line.split()] for line in read_lines(path)]


_FEATURE_HEADER = struct.Struct("<QQQ")


def write_features(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats)
    if feats.ndim != 3:
        raise DataError("features must be [examples x regions x dim]")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(*feats.shape))
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_features(path, n_regions: Optional[int] = N_REGIONS) -> np.ndarray:
    """Load a region-feature file as a float64 ``[examples, regions, dim]`` array."""
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise DataError(f"{path}: truncated feature header")
    n, r, d = _FEATURE_HEADER.unpack_from(raw)
    expected = _FEATURE_HEADER.size + 4 * n * r * d
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for ({n}, {r}, {d}), found {len(raw)}")
    if n_regions is not None and r != n_regions:
        raise DataError(f"{path}: {r} regions per image, model expects {n_regions}")
    arr = np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(n, r, d)
    return arr.astype(np.float64)
