import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmlstm.corpus import (UNKNOWN_CHAR, Vocab, load_and_split, plan_batches, read_corpus, split_lengths, split_text,
                           synthetic_word_corpus, unigram_entropy_bits)
from hmlstm.errors import IngestionError, UsageError


class TestVocab:
    def test_small_example(self):
        v = Vocab.build("abba")
        assert v.chars == ("a", "b")
        assert v.size == 3 and v.unknown == 2
        np.testing.assert_array_equal(v.encode("abc"), [0, 1, 2])

    def test_training_text_example(self):
        v = Vocab.build("aab")
        assert dict(zip(v.chars, range(2))) == {"a": 0, "b": 1} and v.unknown == 2

    def test_code_point_order(self):
        v = Vocab.build("zaZ \n")
        assert v.chars == ("\n", " ", "Z", "a", "z")

    def test_decode_unknown(self):
        v = Vocab.build("ab")
        assert v.decode([0, 2, 1]) == "a" + UNKNOWN_CHAR + "b"

    @settings(max_examples=50, deadline=None)
    @given(st.text(min_size=1, max_size=60))
    def test_round_trip(self, text):
        v = Vocab.build(text)
        assert v.decode(v.encode(text)) == text


class TestSplits:
    def test_fraction_example(self):
        sp = split_text("aabbabab" + "ba", (0.8, 0.1, 0.1))
        assert (len(sp.train), len(sp.valid), len(sp.test)) == (8, 1, 1)
        assert sp.vocab.chars == ("a", "b")

    def test_counts(self):
        assert split_lengths(100, [80, 15, 5]) == (80, 15, 5)
        assert split_lengths(100, [80, 15]) == (80, 15, 5)

    def test_counts_must_sum(self):
        with pytest.raises(IngestionError):
            split_lengths(100, [80, 15, 10])

    def test_fractions_must_sum(self):
        with pytest.raises(IngestionError):
            split_lengths(100, [0.5, 0.1, 0.1])

    def test_empty_split(self):
        with pytest.raises(IngestionError):
            split_lengths(5, [0.9, 0.05, 0.05])

    def test_unseen_characters_map_to_unknown(self):
        sp = split_text("abababab" + "cd", (8, 1, 1))
        assert sp.valid[0] == sp.vocab.unknown
        assert sp.test[0] == sp.vocab.unknown

    @settings(max_examples=50, deadline=None)
    @given(st.integers(200, 5000), st.floats(0.5, 0.9), st.floats(0.02, 0.2))
    def test_contiguous_and_total(self, n, a, b):
        c = 1.0 - a - b
        if c < 0.02:
            return
        x, y, z = split_lengths(n, [a, b, c])
        assert x + y + z == n and min(x, y, z) > 0

    def test_read_corpus(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("héllo\nworld", encoding="utf-8")
        assert read_corpus(p) == "héllo\nworld"
        sp = load_and_split(p, (9, 1, 1))
        assert sp.vocab.decode(sp.train) == "héllo\nwor"

    def test_read_errors(self, tmp_path):
        with pytest.raises(IngestionError):
            read_corpus(tmp_path / "missing.txt")
        (tmp_path / "empty.txt").write_text("")
        with pytest.raises(IngestionError):
            read_corpus(tmp_path / "empty.txt")
        (tmp_path / "bad.txt").write_bytes(b"\xff\xfe\xfa")
        with pytest.raises(IngestionError):
            read_corpus(tmp_path / "bad.txt")


class TestBatchPlan:
    def test_small_example(self):
        plan = plan_batches(np.arange(12), 2, 2)
        assert plan.lanes.tolist() == [[0, 1, 2, 3, 4, 5], [6, 7, 8, 9, 10, 11]]
        assert plan.num_windows == 2
        assert plan.window_at(0).tolist() == [[0, 1, 2], [6, 7, 8]]
        assert plan.window_at(1).tolist() == [[2, 3, 4], [8, 9, 10]]

    def test_single_window(self):
        plan = plan_batches(np.arange(9), 1, 8)
        assert plan.num_windows == 1
        np.testing.assert_array_equal(plan.window_at(0)[0], np.arange(9))

    def test_too_short(self):
        with pytest.raises(UsageError):
            plan_batches(np.arange(5), 2, 2)

    def test_window_out_of_range(self):
        with pytest.raises(IndexError):
            plan_batches(np.arange(12), 2, 2).window_at(2)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 80))
    def test_reconstruct_and_alignment(self, B, T, extra):
        stream = np.arange(B * (T + 1) + extra)
        plan = plan_batches(stream, B, T)
        np.testing.assert_array_equal(plan.reconstruct(), plan.covered())
        lane = len(stream) // B
        for b in range(B):
            # each lane is a contiguous slice of the stream
            np.testing.assert_array_equal(plan.lanes[b], stream[b * lane:(b + 1) * lane])
        for k, w in enumerate(plan):
            assert w.shape == (B, T + 1)
            # targets are the inputs shifted by one
            np.testing.assert_array_equal(w[:, 1:], w[:, :-1] + 1)
            if k + 1 < plan.num_windows:
                np.testing.assert_array_equal(w[:, -1], plan.window_at(k + 1)[:, 0])

    def test_deterministic(self):
        s = np.random.default_rng(0).integers(0, 5, 200)
        a, b = plan_batches(s, 4, 7), plan_batches(s, 4, 7)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestSynthetic:
    def test_length_and_lexicon(self):
        text, lex = synthetic_word_corpus(5000, lexicon_size=20, seed=1)
        assert len(text) == 5000
        assert len(lex) == 20 and len(set(lex)) == 20
        assert set(w for w in text.split(" ")[:-1]) <= set(lex)
        assert all(3 <= len(w) <= 8 for w in lex)

    def test_seeded(self):
        assert synthetic_word_corpus(300, seed=4) == synthetic_word_corpus(300, seed=4)
        assert synthetic_word_corpus(300, seed=4)[0] != synthetic_word_corpus(300, seed=5)[0]

    def test_entropy(self):
        assert unigram_entropy_bits(np.array([0, 1, 0, 1]), 3) == pytest.approx(1.0)
        assert unigram_entropy_bits(np.array([2, 2, 2]), 3) == 0.0
        assert unigram_entropy_bits(np.arange(8), 8) == pytest.approx(3.0)
