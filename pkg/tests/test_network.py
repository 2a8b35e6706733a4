import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmlstm import numerics as nx
from hmlstm.diagnostics import count_ops, stacked_lstm_oracle_compare
from hmlstm.errors import ConfigError, UsageError
from hmlstm.network import (Model, ModelConfig, embed, initial_state, load_checkpoint, output_distribution,
                            sample_text, save_checkpoint, sequence_nll, step)
from hmlstm.numerics import Tape


def small_config(**kw):
    base = dict(layers=3, dims=[6, 5, 4], embed_dim=3, out_embed_dim=7, vocab_size=9, mode="step")
    base.update(kw)
    return ModelConfig(**base)


def make_model(seed=0, **kw):
    return Model.init(small_config(**kw), np.random.default_rng(seed))


def zero_model(**kw):
    m = make_model(**kw)
    for t in m.parameters().values():
        t.data[...] = 0.0
    return m


class TestConfig:
    def test_rejects_mismatched_dims(self):
        with pytest.raises(ConfigError):
            ModelConfig(layers=3, dims=[4, 4], vocab_size=5)

    def test_rejects_bad_mode(self):
        with pytest.raises(ConfigError):
            small_config(mode="fuzzy")

    def test_parameter_names(self):
        names = set(make_model().parameters())
        assert {"embed", "layer1.U_recurrent", "layer3.W_bottomup", "out.gate", "out.W", "out.b",
                "out.proj1", "out.proj3"} <= names
        assert "layer3.U_topdown" not in names
        assert "layer2.U_topdown" in names

    def test_output_shapes(self):
        m = make_model()
        assert m.embedding.shape == (3, 9)
        assert m.output.gate.shape == (3, 15)
        assert m.output.W.shape == (9, 7)
        assert [p.shape for p in m.output.proj] == [(7, 6), (7, 5), (7, 4)]


class TestEmbed:
    def test_column_lookup(self):
        m = make_model()
        for k in range(9):
            np.testing.assert_array_equal(embed(k, m).data, m.embedding.data[:, k])

    def test_matches_one_hot_product(self):
        m = make_model(1)
        one_hot = np.zeros(9)
        one_hot[4] = 1.0
        np.testing.assert_allclose(embed(4, m).data, m.embedding.data @ one_hot, atol=1e-15)

    def test_batch(self):
        m = make_model()
        assert embed(np.array([1, 2, 3, 1]), m).shape == (4, 3)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            embed(9, make_model())


class TestStep:
    def test_zero_params(self):
        m = zero_model()
        state, hs, zs = step(m, 3, initial_state(m), 1.0)
        # lowest layer updates with an undecided boundary (0.5 does not fire)
        assert zs[0].data[0] == 0.0
        for h in hs:
            np.testing.assert_array_equal(h.data, 0.0)
        assert zs[2].data[0] == 0.0

    def test_large_boundary_bias_fires_every_step(self):
        m = make_model()
        m.layers[0].b.data[-1] = 50.0
        state = initial_state(m)
        for x in [1, 2, 3, 4, 5]:
            state, _, zs = step(m, x, state, 1.0)
            assert zs[0].data[0] == 1.0

    def test_lowest_layer_never_copies(self):
        for seed in range(3):
            m = make_model(seed)
            for layer in m.layers:
                layer.b.data[-1] = -3.0
            res = sequence_nll(m, np.random.default_rng(seed).integers(0, 9, 41), None, 1.0)
            ops = count_ops(res.trace)
            assert ops.copy[0] == 0
            assert ops.update[0] + ops.flush[0] == 40

    def test_top_boundary_always_zero(self):
        m = make_model()
        m.layers[2].b.data[:] = 10.0
        state = initial_state(m)
        for x in range(5):
            state, _, zs = step(m, x, state, 1.0)
            assert zs[2].data[0] == 0.0

    def test_wrong_state_depth(self):
        m = make_model()
        with pytest.raises(UsageError):
            step(m, 0, initial_state(m)[:2], 1.0)


class TestOutput:
    def test_zero_model_is_uniform(self):
        m = zero_model()
        hs = [nx.Tensor(np.ones(d)) for d in m.config.dims]
        np.testing.assert_allclose(output_distribution(m, hs), np.full(9, 1 / 9), atol=1e-15)

    def test_zero_gates_give_bias_softmax(self):
        m = make_model(2)
        hs = [nx.Tensor(np.random.default_rng(2).normal(size=d)) for d in m.config.dims]
        p = output_distribution(m, hs, gate_override=0.0)
        b = m.output.b.data
        np.testing.assert_allclose(p, np.exp(b - b.max()) / np.exp(b - b.max()).sum(), atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_probability_vector(self, seed):
        m = make_model(seed)
        rng = np.random.default_rng(seed)
        hs = [nx.Tensor(rng.normal(scale=3, size=d)) for d in m.config.dims]
        p = output_distribution(m, hs)
        assert np.all(p >= 0) and np.all(np.isfinite(p))
        assert abs(p.sum() - 1.0) <= 1e-12

    def test_wrong_hidden_count(self):
        m = make_model()
        with pytest.raises(UsageError):
            output_distribution(m, [nx.Tensor(np.ones(6))])


class TestSequenceNLL:
    def test_uniform_model(self):
        cfg = ModelConfig(layers=2, dims=[4, 4], embed_dim=4, out_embed_dim=4, vocab_size=27)
        m = Model.init(cfg, np.random.default_rng(0))
        for t in m.parameters().values():
            t.data[...] = 0.0
        res = sequence_nll(m, np.arange(11) % 27, None, 1.0)
        assert res.bpc == pytest.approx(math.log2(27), abs=1e-12)
        assert float(res.loss.data) == pytest.approx(math.log(27), abs=1e-12)

    def test_deterministic(self):
        m = make_model(4)
        w = np.random.default_rng(4).integers(0, 9, 30)
        a, b = sequence_nll(m, w, None, 1.0), sequence_nll(m, w, None, 1.0)
        assert a.bpc == b.bpc
        assert np.array_equal(a.trace.z, b.trace.z)

    def test_carried_state_matches_one_long_window(self):
        m = make_model(5)
        w = np.random.default_rng(5).integers(0, 9, 13)
        whole = sequence_nll(m, w, None, 1.0)
        first = sequence_nll(m, w[:7], None, 1.0)
        second = sequence_nll(m, w[6:], first.state, 1.0)
        np.testing.assert_allclose(np.concatenate([first.step_nll, second.step_nll]), whole.step_nll,
                                   rtol=0, atol=1e-13)

    def test_batch_matches_lanes(self):
        m = make_model(6)
        w = np.random.default_rng(6).integers(0, 9, (3, 9))
        batched = sequence_nll(m, w, None, 1.0)
        for b in range(3):
            single = sequence_nll(m, w[b], None, 1.0)
            np.testing.assert_allclose(batched.step_nll[:, b], single.step_nll, rtol=0, atol=1e-13)
            assert np.array_equal(batched.trace[b].z, single.trace.z)
        assert batched.bpc == pytest.approx(np.mean([sequence_nll(m, r, None, 1.0).bpc for r in w]), abs=1e-13)

    def test_loss_is_on_tape(self):
        m = make_model(7)
        with Tape() as tape:
            res = sequence_nll(m, [1, 2, 3, 4], None, 1.0)
        grads = tape.backward(res.loss)
        assert m.output.b in grads
        assert np.abs(m.output.W.grad).sum() > 0

    def test_too_short(self):
        with pytest.raises(UsageError):
            sequence_nll(make_model(), [3], None, 1.0)

    def test_trace_shapes(self):
        res = sequence_nll(make_model(), np.arange(8), None, 1.0)
        assert res.trace.z.shape == (2, 7)
        assert res.trace.norms.shape == (3, 7)


class TestStackedOracle:
    @pytest.mark.parametrize("seed", range(3))
    def test_forced_updates_match_stacked_lstm(self, seed):
        m = make_model(seed)
        symbols = np.random.default_rng(seed).integers(0, 9, 50)
        assert stacked_lstm_oracle_compare(m, symbols) <= 1e-10

    def test_rejects_layer_norm(self):
        with pytest.raises(UsageError):
            stacked_lstm_oracle_compare(make_model(layer_norm=True), [0, 1])


class TestSample:
    def test_argmax_follows_bias(self):
        m = zero_model()
        m.output.b.data[2] = 5.0
        assert sample_text(m, [0], 6, temperature=0.0) == [2] * 6

    def test_lengths_and_validation(self):
        m = make_model()
        assert sample_text(m, [1], 0) == []
        assert len(sample_text(m, [1, 2], 25, rng=np.random.default_rng(1))) == 25
        with pytest.raises(UsageError):
            sample_text(m, [], 3)
        with pytest.raises(UsageError):
            sample_text(m, [1], 3, temperature=-1.0)

    def test_seeded(self):
        m = make_model(3)
        a = sample_text(m, [1], 30, rng=np.random.default_rng(9))
        b = sample_text(m, [1], 30, rng=np.random.default_rng(9))
        assert a == b
        assert all(0 <= s < 9 for s in a)

    def test_near_zero_temperature_matches_argmax(self):
        m = make_model(3)
        assert sample_text(m, [1], 10, temperature=1e-6, rng=np.random.default_rng(0)) == \
            sample_text(m, [1], 10, temperature=0.0)


class TestCheckpoint:
    def test_byte_round_trip(self, tmp_path):
        m = make_model(8, layer_norm=True)
        meta = {"epoch": 3, "slope": 1.12, "vocab": list("abcdefgh")}
        save_checkpoint(tmp_path / "a.ckpt", m, meta, {"opt.m.embed": np.ones((3, 9))})
        ck = load_checkpoint(tmp_path / "a.ckpt")
        assert ck.meta == meta
        for name, t in m.parameters().items():
            assert np.array_equal(ck.model.parameters()[name].data, t.data)
        save_checkpoint(tmp_path / "b.ckpt", ck.model, ck.meta, {"opt.m.embed": ck.arrays["opt.m.embed"]})
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_loaded_model_behaves_identically(self, tmp_path):
        m = make_model(9)
        save_checkpoint(tmp_path / "m.ckpt", m)
        again = load_checkpoint(tmp_path / "m.ckpt").model
        w = np.arange(20) % 9
        assert sequence_nll(m, w, None, 1.0).bpc == sequence_nll(again, w, None, 1.0).bpc

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x").write_bytes(b"not a checkpoint")
        with pytest.raises(UsageError):
            load_checkpoint(tmp_path / "x")
