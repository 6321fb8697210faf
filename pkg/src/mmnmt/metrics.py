"""Corpus-level BLEU-1..4 with clipped n-gram counts and brevity penalty."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuReport:
    matches: list        # clipped n-gram matches, orders 1..max_n
    totals: list         # hypothesis n-gram counts
    hyp_len: int
    ref_len: int
    smooth: bool = False

    @property
    def max_n(self) -> int:
        return len(self.matches)

    @property
    def brevity_penalty(self) -> float:
        if self.hyp_len == 0:
            return 0.0
        if self.hyp_len >= self.ref_len:
            return 1.0
        return math.exp(1.0 - self.ref_len / self.hyp_len)

    def precision(self, n: int) -> float:
        m, t = self.matches[n - 1], self.totals[n - 1]
        if self.smooth:
            return (m + 1.0) / (t + 1.0)
        return m / t if t else 0.0

    @property
    def bleu(self) -> dict:
        """BLEU-k for k = 1..max_n, as percentages."""
        out = {}
        bp = self.brevity_penalty
        log_sum = 0.0
        for k in range(1, self.max_n + 1):
            p = self.precision(k)
            if p <= 0.0 or bp == 0.0 or log_sum == -math.inf:
                log_sum = -math.inf
                out[k] = 0.0
                continue
            log_sum += math.log(p)
            out[k] = 100.0 * bp * math.exp(log_sum / k)
        return out

    def lines(self) -> list[str]:
        """``key=value`` lines; scores to two decimals, METEOR slot reserved."""
        rows = [f"bleu{k}={v:.2f}" for k, v in self.bleu.items()]
        rows.append(f"bp={self.brevity_penalty:.4f}")
        rows.append(f"hyp_len={self.hyp_len}")
        rows.append(f"ref_len={self.ref_len}")
        for n in range(1, self.max_n + 1):
            rows.append(f"matches{n}={self.matches[n - 1]}/{self.totals[n - 1]}")
        rows.append("meteor=NA")
        return rows


def effective_ref_len(hyp_len: int, ref_lens: Sequence[int], rule: str = "shortest") -> int:
    """Reference length charged to one sentence by the brevity penalty.

    ``shortest`` never grows when a reference is added, so extra references
    cannot lower the score; ``closest`` (ties to the shorter) can.
    """
    if rule == "shortest":
        return min(ref_lens)
    if rule == "closest":
        return min(ref_lens, key=lambda r: (abs(r - hyp_len), r))
    raise ValueError(f"unknown reference-length rule {rule!r}")


def corpus_bleu(hyps: Sequence[Sequence], refs: Sequence[Sequence[Sequence]], max_n: int = 4,
                smooth: bool = False, ref_len_rule: str = "shortest") -> BleuReport:
    """Score tokenized hypotheses against one or more references each.

    ``refs[i]`` is a list of reference token sequences for ``hyps[i]``. With a
    single reference per sentence both length rules coincide.
    """
    if not hyps:
        raise ValueError("empty hypothesis set")
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} reference sets")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, rs in zip(hyps, refs):
        if not rs:
            raise ValueError("every hypothesis needs at least one reference")
        hyp = list(hyp)
        hyp_len += len(hyp)
        ref_len += effective_ref_len(len(hyp), [len(r) for r in rs], ref_len_rule)
        for n in range(1, max_n + 1):
            h = ngrams(hyp, n)
            if not h:
                continue
            best: Counter = Counter()
            for r in rs:
                best |= ngrams(list(r), n)
            matches[n - 1] += sum(min(c, best[g]) for g, c in h.items())
            totals[n - 1] += sum(h.values())
    return BleuReport(matches, totals, hyp_len, ref_len, smooth)
