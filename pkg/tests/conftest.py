from collections import OrderedDict

import numpy as np
import pytest

from mmnmt.model import Dims, ModelParams, param_table

_criteria = []


def record_criterion(number, title, passed, detail=""):
    _criteria.append((number, title, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_criteria):
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] {number:>2}. {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


TINY = Dims(src_vocab=7, tgt_vocab=9, embed=4, hidden=6, att=5, img_dim=3, n_regions=3)


def random_params(dims, seed, multimodal=True, scale=0.5):
    rng = np.random.default_rng(seed)
    arrays = OrderedDict()
    for name, shape, kind in param_table(dims, multimodal):
        arrays[name] = rng.normal(0.0, scale, size=shape)
    return ModelParams.from_arrays(dims, arrays, multimodal)


def as_lists(params):
    return {n: t.data.tolist() for n, t in params.items()}


@pytest.fixture
def tiny_dims():
    return TINY


@pytest.fixture
def tiny_params():
    return random_params(TINY, seed=11)


WORDS_SRC = ["a", "man", "woman", "dog", "runs", "sits", "on", "the", "grass", "red", "ball", "plays"]
WORDS_TGT = ["ein", "mann", "frau", "hund", "rennt", "sitzt", "auf", "dem", "gras", "roter", "ball", "spielt"]


def write_corpus(root, n=12, seed=0, n_regions=4, img_dim=3, prefix="train"):
    """Word-for-word toy parallel corpus plus a matching feature file."""
    from mmnmt.data import write_features

    rng = np.random.default_rng(seed)
    src_lines, tgt_lines = [], []
    for _ in range(n):
        idx = rng.integers(0, len(WORDS_SRC), size=rng.integers(3, 7))
        src_lines.append(" ".join(WORDS_SRC[i] for i in idx))
        tgt_lines.append(" ".join(WORDS_TGT[i] for i in idx))
    (root / f"{prefix}.en").write_text("\n".join(src_lines) + "\n", encoding="utf-8")
    (root / f"{prefix}.de").write_text("\n".join(tgt_lines) + "\n", encoding="utf-8")
    write_features(root / f"{prefix}.feat", rng.normal(size=(n, n_regions, img_dim)))
    return src_lines, tgt_lines
