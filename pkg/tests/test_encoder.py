import numpy as np
import pytest

from mmnmt import tensor as T
from mmnmt.encoder import GruCellParams, encode, encode_text, gru_cell, project_image
from mmnmt.tensor import Tensor

import oracles
from conftest import TINY, as_lists, random_params


def test_gru_cell_matches_scalar_oracle(tiny_params):
    rng = np.random.default_rng(1)
    x, h = rng.normal(size=(1, TINY.embed)), rng.normal(size=(1, TINY.hidden))
    got = gru_cell(Tensor(x), Tensor(h), GruCellParams.from_params(tiny_params, "enc.fwd")).data[0]
    P = oracles.sub(as_lists(tiny_params), "enc.fwd")
    np.testing.assert_allclose(got, oracles.gru(x[0].tolist(), h[0].tolist(), P), rtol=1e-12, atol=1e-14)


def test_gru_with_closed_update_gate_copies_state(tiny_params):
    arrays = tiny_params.arrays()
    arrays["enc.fwd.bz"] = np.full(TINY.hidden, 60.0)
    p = type(tiny_params).from_arrays(TINY, arrays, True)
    h = np.random.default_rng(2).normal(size=(1, TINY.hidden))
    out = gru_cell(Tensor(np.ones((1, TINY.embed))), Tensor(h), GruCellParams.from_params(p, "enc.fwd"))
    np.testing.assert_allclose(out.data, h, atol=1e-12)


def test_annotations_match_oracle(tiny_params):
    src = [1, 4, 5, 6, 2]
    got = encode_text(src, tiny_params).data
    assert got.shape == (1, 5, 2 * TINY.hidden)
    want = oracles.encode_text(as_lists(tiny_params), src, TINY.hidden)
    np.testing.assert_allclose(got[0], want, rtol=1e-12, atol=1e-14)


def test_padding_does_not_leak(tiny_params):
    short = [1, 4, 2]
    batch = np.array([[1, 4, 2, 0, 0], [1, 5, 6, 4, 2]])
    mask = (batch != 0).astype(float)
    mask[0, 0] = 1.0
    got = encode_text(batch, tiny_params, mask).data
    alone = encode_text(short, tiny_params).data[0]
    np.testing.assert_allclose(got[0, :3], alone, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(got[1], encode_text(batch[1], tiny_params).data[0], rtol=1e-12, atol=1e-14)


def test_image_projection_matches_oracle(tiny_params):
    feats = np.random.default_rng(3).normal(size=(TINY.n_regions, TINY.img_dim))
    got = project_image(feats, tiny_params["enc.img.W"], tiny_params["enc.img.b"]).data[0]
    P = as_lists(tiny_params)
    np.testing.assert_allclose(got, oracles.project_image(feats.tolist(), P["enc.img.W"], P["enc.img.b"]),
                               rtol=1e-12, atol=1e-14)


def test_image_shape_checks(tiny_params):
    W, b = tiny_params["enc.img.W"], tiny_params["enc.img.b"]
    with pytest.raises(T.ShapeError, match="regions"):
        project_image(np.zeros((1, 4, TINY.img_dim)), W, b, n_regions=3)
    with pytest.raises(T.ShapeError, match="feature dim"):
        project_image(np.zeros((1, 3, TINY.img_dim + 1)), W, b)


def test_encode_requires_image_in_multimodal_mode(tiny_params):
    with pytest.raises(ValueError):
        encode(tiny_params, [1, 4, 2], multimodal=True)
    mono = random_params(TINY, 5, multimodal=False)
    with pytest.raises(ValueError):
        encode(mono, [1, 4, 2], image=np.zeros((3, 3)), multimodal=True)


def test_encode_outputs(tiny_params):
    enc = encode(tiny_params, [[1, 4, 2]], image=np.zeros((1, 3, 3)), multimodal=True)
    assert enc.h_img.shape == (1, 3, TINY.ann)
    k = enc.repeat(4)
    assert k.h_txt.shape == (4, 3, TINY.ann) and k.h_img.shape[0] == 4
    np.testing.assert_array_equal(k.h_txt.data[3], enc.h_txt.data[0])
