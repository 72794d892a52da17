"""Tests for the session encoder, heads, and checkpoints."""

import numpy as np
import pytest

from turnsat import autodiff as ad
from turnsat import model as m
from turnsat.data import Session, Turn

from conftest import random_session, random_turn


def expected_param_count(cfg):
    E, H, Hh, S = cfg.embed_dim, cfg.gru_hidden, cfg.head_hidden, cfg.summary_dim
    total = cfg.vocab_size * E              # embedding
    total += E * 2 * E + E                  # turn projection
    n_dirs = 2 if cfg.bidirectional else 1
    for l in range(cfg.gru_layers):
        in_dim = E if l == 0 else S
        total += 2 * n_dirs * 3 * (H * in_dim + H * H + H)   # prev and next stacks
    total += (Hh * E + Hh + E * Hh + E)     # targeted branch MLP
    total += 2 * (Hh * S + Hh + E * Hh + E)  # context branch MLPs
    total += 2 * (Hh * E + Hh + 1 * Hh + 1)  # two heads
    return total


class TestInitParams:
    def test_deterministic(self, tiny_cfg):
        a, b = m.init_params(tiny_cfg), m.init_params(tiny_cfg)
        for ta, tb in zip(a.tensors(), b.tensors()):
            assert ta.name == tb.name
            np.testing.assert_array_equal(ta.data, tb.data)

    @pytest.mark.parametrize("layers,bidir", [(1, True), (2, True), (1, False), (2, False)])
    def test_param_count_closed_form(self, layers, bidir):
        cfg = m.ModelConfig(vocab_size=40, embed_dim=6, gru_hidden=5,
                            gru_layers=layers, bidirectional=bidir, head_hidden=7)
        assert m.init_params(cfg).n_params() == expected_param_count(cfg)

    def test_all_roles_present(self, tiny_cfg):
        params = m.init_params(tiny_cfg)
        for role in (m.BODY, m.HEAD_S, m.HEAD_T):
            assert params.role_layers(role)

    def test_roles_partition(self, tiny_cfg):
        params = m.init_params(tiny_cfg)
        seen = {}
        for layer in params.layers.values():
            for t in layer.tensors:
                assert t.name not in seen
                seen[t.name] = layer.role

    def test_update_gate_bias_positive(self, tiny_cfg):
        params = m.init_params(tiny_cfg)
        for layer in params.layers.values():
            for t in layer.tensors:
                if t.name.endswith(".b_z"):
                    assert np.all(t.data > 0)


class TestEncodeTurn:
    def test_identical_turns_identical_vectors(self, tiny_cfg, rng):
        params = m.init_params(tiny_cfg)
        turn = random_turn(rng, tiny_cfg.vocab_size)
        a = m.encode_turn(params, turn).data
        b = m.encode_turn(params, turn).data
        np.testing.assert_array_equal(a, b)

    def test_bag_of_words_symmetry(self, tiny_cfg):
        params = m.init_params(tiny_cfg)
        t1 = Turn((1, 2, 3), (4,), "a b c", "d")
        t2 = Turn((3, 1, 2), (4,), "c a b", "d")
        np.testing.assert_allclose(
            m.encode_turn(params, t1).data, m.encode_turn(params, t2).data, atol=1e-15
        )

    def test_output_shape(self, tiny_cfg, rng):
        params = m.init_params(tiny_cfg)
        vec = m.encode_turn(params, random_turn(rng, tiny_cfg.vocab_size))
        assert vec.data.shape == (tiny_cfg.embed_dim,)

    def test_fully_empty_turn_uses_zero_pool(self, tiny_cfg, rng):
        params = m.init_params(tiny_cfg)
        # give the projection bias a trained (nonzero) value: the empty-turn
        # vector must follow it, since the pooled input is all zeros
        bias = params.layer("turn_proj").tensors[1]
        bias.data = rng.normal(size=bias.data.shape)
        empty = Turn((), (), "", "")
        got = m.encode_turn(params, empty).data
        np.testing.assert_allclose(got, np.tanh(bias.data), atol=1e-15)
        assert np.any(got != 0)


class TestSessionRepresentation:
    def test_single_turn_pools_two_zero_branches(self, tiny_cfg, rng):
        params = m.init_params(tiny_cfg)
        sess = random_session(rng, tiny_cfg.vocab_size, n_turns=1, targeted=0)
        z = m.session_representation(params, sess).data
        targeted = m._branch_mlp(params.layer("mlp_targeted").tensors,
                                 m.encode_turn(params, sess.turns[0])).data
        np.testing.assert_allclose(z, targeted / 3.0, atol=1e-15)

    def test_shape_constant_across_context_lengths(self, tiny_cfg, rng):
        params = m.init_params(tiny_cfg)
        for n, t in [(1, 0), (3, 1), (5, 2), (4, 3)]:
            sess = random_session(rng, tiny_cfg.vocab_size, n_turns=n, targeted=t)
            z = m.session_representation(params, sess)
            assert z.data.shape == (tiny_cfg.embed_dim,)

    def test_prev_order_sensitivity(self, tiny_cfg, rng):
        params = m.init_params(tiny_cfg)
        turns = tuple(random_turn(rng, tiny_cfg.vocab_size) for _ in range(3))
        a = Session(turns=turns, targeted_index=2, skill="sk")
        b = Session(turns=(turns[1], turns[0], turns[2]), targeted_index=2, skill="sk")
        za = m.session_representation(params, a).data
        zb = m.session_representation(params, b).data
        assert not np.allclose(za, zb)

    def test_batch_composition_invariance(self, tiny_cfg, rng):
        params = m.init_params(tiny_cfg)
        sessions = [random_session(rng, tiny_cfg.vocab_size) for _ in range(4)]
        alone = [m.session_representation(params, s).data for s in sessions]
        cache = {}
        batched = [m.session_representation(params, s, cache).data for s in sessions]
        for a, b in zip(alone, batched):
            np.testing.assert_array_equal(a, b)

    def test_shared_encoder_gets_context_gradients(self, tiny_cfg):
        params = m.init_params(tiny_cfg)
        context_only_token = 17
        turns = (
            Turn((context_only_token,), (context_only_token,), "c", "c"),
            Turn((1, 2), (3,), "a b", "d"),
        )
        sess = Session(turns=turns, targeted_index=1, skill="sk")
        loss = ad.bce_with_logits(
            ad.reshape(m.forward_logit(params, sess, "satisfaction"), (1,)),
            np.array([1.0]),
        )
        grads = ad.backward(loss)
        assert np.any(grads["embed.table"][context_only_token] != 0)


class TestHeadForward:
    def test_zero_weights_zero_logit(self, tiny_cfg):
        params = m.init_params(tiny_cfg)
        for t in params.layer("head_satisfaction").tensors:
            t.data = np.zeros_like(t.data)
        z = ad.Tensor(np.zeros(tiny_cfg.embed_dim))
        assert float(m.head_forward(params, z, "satisfaction").data) == 0.0

    def test_finite_for_large_z(self, tiny_cfg, rng):
        params = m.init_params(tiny_cfg)
        z = ad.Tensor(rng.normal(scale=1e3, size=tiny_cfg.embed_dim))
        assert np.isfinite(m.head_forward(params, z, "contrastive").data)

    def test_matches_two_layer_oracle(self, tiny_cfg, rng):
        params = m.init_params(tiny_cfg)
        z = rng.normal(size=tiny_cfg.embed_dim)
        w1, b1, w2, b2 = (t.data for t in params.layer("head_contrastive").tensors)
        want = float((w2 @ np.maximum(w1 @ z + b1, 0.0) + b2)[0])
        got = float(m.head_forward(params, ad.Tensor(z), "contrastive").data)
        assert abs(got - want) < 1e-12

    def test_unknown_head(self, tiny_cfg):
        params = m.init_params(tiny_cfg)
        with pytest.raises(ad.ContractError):
            m.head_forward(params, ad.Tensor(np.zeros(tiny_cfg.embed_dim)), "nope")


class TestReinitHead:
    def test_body_untouched(self, tiny_cfg):
        params = m.init_params(tiny_cfg)
        fresh = m.reinit_head(params, "satisfaction", seed=99)
        for layer in params.layers.values():
            if layer.name == "head_satisfaction":
                continue
            for told, tnew in zip(layer.tensors, fresh.layer(layer.name).tensors):
                np.testing.assert_array_equal(told.data, tnew.data)

    def test_same_seed_identical(self, tiny_cfg):
        params = m.init_params(tiny_cfg)
        a = m.reinit_head(params, "satisfaction", seed=5)
        b = m.reinit_head(params, "satisfaction", seed=5)
        for ta, tb in zip(a.layer("head_satisfaction").tensors,
                          b.layer("head_satisfaction").tensors):
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_forward_changes(self, tiny_cfg, rng):
        params = m.init_params(tiny_cfg)
        fresh = m.reinit_head(params, "satisfaction", seed=31)
        sess = random_session(rng, tiny_cfg.vocab_size)
        before = float(m.forward_logit(params, sess, "satisfaction").data)
        after = float(m.forward_logit(fresh, sess, "satisfaction").data)
        assert before != after

    def test_cannot_reinit_body(self, tiny_cfg):
        with pytest.raises(ad.ContractError):
            m.reinit_head(m.init_params(tiny_cfg), "embed", seed=0)


class TestFullModelGradients:
    # eps 1e-4 balances float64 roundoff in the finite differences against
    # truncation; smaller steps push tiny-gradient elements into the
    # denominator floor of the relative-error formula
    def test_grad_check_full_loss(self, rng):
        cfg = m.ModelConfig(vocab_size=12, embed_dim=4, gru_hidden=3, gru_layers=2,
                            bidirectional=True, head_hidden=4, seed=3)
        params = m.init_params(cfg)
        sessions = [random_session(rng, cfg.vocab_size, n_turns=5, targeted=2)
                    for _ in range(2)]
        targets = np.array([1.0, 0.0])

        def f(_):
            logits = ad.stack([m.forward_logit(params, s, "contrastive") for s in sessions])
            return ad.bce_with_logits(logits, targets)

        assert ad.grad_check(f, params.tensors(), eps=1e-4) < 1e-4

    def test_grad_check_satisfaction_path(self, rng):
        cfg = m.ModelConfig(vocab_size=12, embed_dim=4, gru_hidden=3, gru_layers=1,
                            bidirectional=False, head_hidden=4, seed=7)
        params = m.init_params(cfg)
        sess = random_session(rng, cfg.vocab_size, n_turns=4, targeted=1)

        def f(_):
            logits = ad.stack([m.forward_logit(params, sess, "satisfaction")])
            return ad.bce_with_logits(logits, np.array([0.0]))

        assert ad.grad_check(f, params.tensors(), eps=1e-4) < 1e-4


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tiny_cfg, tmp_path, rng):
        params = m.init_params(tiny_cfg)
        path = str(tmp_path / "ckpt")
        m.save_checkpoint(params, path)
        loaded = m.load_checkpoint(path, expect=params)
        for a, b in zip(params.tensors(), loaded.tensors()):
            assert a.name == b.name
            np.testing.assert_array_equal(a.data, b.data)
        sess = random_session(rng, tiny_cfg.vocab_size)
        assert float(m.forward_logit(params, sess, "satisfaction").data) == float(
            m.forward_logit(loaded, sess, "satisfaction").data
        )

    def test_shape_mismatch_rejected(self, tiny_cfg, tmp_path):
        params = m.init_params(tiny_cfg)
        path = str(tmp_path / "ckpt")
        m.save_checkpoint(params, path)
        other = m.init_params(m.ModelConfig(vocab_size=30, embed_dim=6, gru_hidden=3,
                                            head_hidden=4))
        with pytest.raises(m.CheckpointError):
            m.load_checkpoint(path, expect=other)

    def test_role_mismatch_rejected(self, tiny_cfg, tmp_path):
        params = m.init_params(tiny_cfg)
        path = str(tmp_path / "ckpt")
        m.save_checkpoint(params, path)
        manifest = (tmp_path / "ckpt" / "manifest.txt").read_text()
        (tmp_path / "ckpt" / "manifest.txt").write_text(
            manifest.replace("head_contrastive head_S", "head_contrastive body")
        )
        with pytest.raises(m.CheckpointError):
            m.load_checkpoint(str(tmp_path / "ckpt"), expect=params)
