import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmnmt.data import (BOS, EOS, PAD, UNK, DataError, ParallelExample, Vocabulary, build_vocab,
                        collate, filter_pairs, keep_pair, make_batches, normalize_tokenize,
                        read_features, read_ids, read_parallel, write_features, write_ids)


def test_tokenizer_splits_punctuation_and_lowercases():
    assert normalize_tokenize('A Man, "running"!') == ["a", "man", ",", '"', "running", '"', "!"]
    assert normalize_tokenize("   ") == []


class TestVocabulary:
    def test_reserved_ids(self):
        v = Vocabulary(["dog"])
        assert [v.lookup(t) for t in ("<pad>", "<s>", "</s>", "<unk>")] == [PAD, BOS, EOS, UNK]
        assert v.lookup("dog") == 4 and len(v) == 5

    def test_oov_maps_to_unk(self):
        v = Vocabulary(["dog"])
        assert v.encode(["cat", "dog"]) == [BOS, UNK, 4, EOS]
        assert v.encode(["cat"], frame=False) == [UNK]

    def test_decode_skips_control_tokens(self):
        v = Vocabulary(["dog", "cat"])
        assert v.decode([BOS, 5, 4, UNK, EOS, PAD]) == ["cat", "dog", "<unk>"]

    def test_round_trip_file(self, tmp_path):
        v = Vocabulary(["b", "a", "c"])
        v.save(tmp_path / "v")
        assert Vocabulary.load(tmp_path / "v").itos == v.itos

    def test_build_vocab_frequency_then_first_seen(self):
        corpus = [["b", "a", "c"], ["a", "c", "d"], ["d"]]
        v = build_vocab(corpus, cap=3)
        assert v.itos[4:] == ["a", "c", "d"]
        assert "b" not in v and v.lookup("b") == UNK

    def test_build_vocab_cap(self):
        v = build_vocab([[str(i) for i in range(100)]], cap=10)
        assert len(v) == 14

    def test_empty_corpus(self):
        with pytest.raises(DataError):
            build_vocab([[]], cap=5)


class TestFilter:
    @pytest.mark.parametrize("n", [3, 50])
    def test_boundary_lengths_kept(self, n):
        assert keep_pair(n, n)

    @pytest.mark.parametrize("n", [2, 51])
    def test_out_of_range_lengths_dropped(self, n):
        assert not keep_pair(n, n)
        assert not keep_pair(n, 10) or n == 10

    def test_ratio_exactly_three_kept(self):
        assert keep_pair(5, 15) and keep_pair(15, 5)

    def test_ratio_above_three_dropped(self):
        assert not keep_pair(5, 16)
        # 3.01 needs lengths past the default cap
        assert keep_pair(100, 300, max_len=400)
        assert not keep_pair(100, 301, max_len=400)

    def test_filter_pairs_keeps_order(self):
        pairs = [(["a"] * 3, ["b"] * 9), (["a"] * 2, ["b"] * 3), (["a"] * 4, ["b"] * 4)]
        assert filter_pairs(pairs) == [pairs[0], pairs[2]]

    @given(st.integers(0, 80), st.integers(0, 80))
    def test_symmetric(self, a, b):
        assert keep_pair(a, b) == keep_pair(b, a)


def _ex(n_src, n_tgt, feat=None):
    return ParallelExample([BOS] + [4] * n_src + [EOS], [BOS] + [5] * n_tgt + [EOS], feat)


class TestBatching:
    def test_example_must_be_framed(self):
        with pytest.raises(DataError):
            ParallelExample([4, EOS], [BOS, EOS])
        with pytest.raises(DataError):
            ParallelExample([BOS, PAD, EOS], [BOS, EOS])

    def test_collate_pads_and_masks(self):
        b = collate([_ex(1, 3), _ex(3, 1)])
        assert b.src.shape == (2, 5) and b.tgt.shape == (2, 5)
        np.testing.assert_array_equal(b.src_len, [3, 5])
        np.testing.assert_array_equal(b.src_mask[0], [1, 1, 1, 0, 0])
        assert b.src[0, 3] == PAD and b.image is None

    def test_collate_mixed_features_rejected(self):
        with pytest.raises(DataError):
            collate([_ex(1, 1, np.zeros((2, 2))), _ex(1, 1)])

    @pytest.mark.parametrize("sort", [False, True])
    def test_every_example_exactly_once(self, sort):
        exs = [_ex(1 + i % 7, 1 + i) for i in range(23)]
        batches = make_batches(exs, batch_size=5, sort_by_src_len=sort, shuffle_seed=9)
        assert [b.size for b in batches].count(5) == 4 and sum(b.size for b in batches) == 23
        seen = sorted(int(l) for b in batches for l in b.tgt_len)
        assert seen == sorted(len(e.tgt_ids) for e in exs)

    def test_sorted_batches_are_homogeneous(self):
        exs = [_ex(1 + i % 4, 2) for i in range(16)]
        for b in make_batches(exs, batch_size=4, sort_by_src_len=True, shuffle_seed=0):
            assert len(set(b.src_len.tolist())) == 1

    def test_seeded_order_is_reproducible(self):
        exs = [_ex(1 + i % 5, 1 + i) for i in range(20)]
        a = make_batches(exs, 4, True, shuffle_seed=3)
        b = make_batches(exs, 4, True, shuffle_seed=3)
        assert all(np.array_equal(x.tgt, y.tgt) for x, y in zip(a, b))


class TestFiles:
    def test_ids_round_trip(self, tmp_path):
        seqs = [[1, 4, 2], [1, 2]]
        write_ids(tmp_path / "x.ids", seqs)
        assert read_ids(tmp_path / "x.ids") == seqs

    def test_parallel_misaligned(self, tmp_path):
        (tmp_path / "s").write_text("a b\nc\n")
        (tmp_path / "t").write_text("a\n")
        with pytest.raises(DataError):
            read_parallel(tmp_path / "s", tmp_path / "t")

    def test_features_round_trip(self, tmp_path):
        f = np.random.default_rng(0).normal(size=(2, 196, 3)).astype(np.float32)
        write_features(tmp_path / "f.bin", f)
        out = read_features(tmp_path / "f.bin")
        assert out.dtype == np.float64
        np.testing.assert_array_equal(out, f.astype(np.float64))

    def test_features_region_count_checked(self, tmp_path):
        write_features(tmp_path / "f.bin", np.zeros((1, 4, 2)))
        with pytest.raises(DataError, match="196"):
            read_features(tmp_path / "f.bin")
        assert read_features(tmp_path / "f.bin", n_regions=4).shape == (1, 4, 2)

    def test_truncated_features(self, tmp_path):
        write_features(tmp_path / "f.bin", np.zeros((1, 4, 2)))
        raw = (tmp_path / "f.bin").read_bytes()
        (tmp_path / "f.bin").write_bytes(raw[:-4])
        with pytest.raises(DataError):
            read_features(tmp_path / "f.bin", n_regions=None)
