import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paumer import numerics as nx
from paumer.model import ConfigError, ModelConfig, decode_tokens, forward_full, init_params
from paumer.numerics import Tensor
from paumer.pausing import (PauseConfig, PauseState, assemble, early_exit_token_logits,
                            encode_with_pausing, forward_early_exit, forward_with_pausing,
                            kept_count, pause_step, random_keep, select_keep, token_entropy)


def sort_oracle(entropy, keep):
    """Full stable sort: pause the first ``n - keep`` by (entropy, index)."""
    b, n = entropy.shape
    out = []
    for row in entropy:
        order = sorted(range(n), key=lambda i: (row[i], i))
        out.append(sorted(order[n - keep:]))
    return np.array(out, dtype=np.int64).reshape(b, keep)


class TestEntropy:
    def test_uniform_is_log_k(self):
        for k in (2, 3, 5, 19):
            assert abs(token_entropy(np.zeros((1, k)))[0] - math.log(k)) <= 1e-9

    def test_one_hot_is_zero(self):
        z = np.full((1, 4), -1e4)
        z[0, 2] = 1e4
        assert abs(token_entropy(z)[0]) <= 1e-9

    def test_two_class_value(self):
        p = 0.8
        ref = -(p * math.log(p) + (1 - p) * math.log(1 - p))
        assert abs(token_entropy([[math.log(p), math.log(1 - p)]])[0] - ref) <= 1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 12), st.integers(0, 2**31 - 1), st.floats(0.01, 300))
    def test_bounds(self, k, seed, spread):
        z = np.random.default_rng(seed).normal(size=(6, k)) * spread
        h = token_entropy(z)
        assert np.all(h >= 0) and np.all(h <= math.log(k) + 1e-12)


class TestSelection:
    def test_hand_case(self):
        e = np.array([[0.5, 0.1, 0.9, 0.3]])
        np.testing.assert_array_equal(select_keep(e, 2), [[0, 2]])

    def test_ties_pause_lower_index(self):
        e = np.array([[0.2, 0.2, 0.2, 0.2]])
        np.testing.assert_array_equal(select_keep(e, 1), [[3]])

    def test_keep_all(self):
        np.testing.assert_array_equal(select_keep(np.zeros((2, 3)), 3), [[0, 1, 2]] * 2)

    def test_full_sort_oracle_1000_instances(self):
        r = np.random.default_rng(0)
        for _ in range(1000):
            b, n = int(r.integers(1, 4)), int(r.integers(1, 40))
            keep = int(r.integers(1, n + 1))
            if r.random() < 0.4:
                e = r.integers(0, 4, size=(b, n)).astype(float)   # many ties
            else:
                e = r.random((b, n))
            np.testing.assert_array_equal(select_keep(e, keep), sort_oracle(e, keep))

    def test_random_keep_shape_and_uniqueness(self, rng):
        k = random_keep(rng, 5, 20, 7)
        assert k.shape == (5, 7)
        for row in k:
            assert len(set(row)) == 7 and np.all(np.diff(row) > 0)


class TestKeptCount:
    def test_values(self):
        assert kept_count(100, 0.4) == 60
        assert kept_count(64, 0.2) == 52
        assert kept_count(5, 0.0) == 5
        assert kept_count(1, 0.99) == 1

    @given(st.integers(1, 5000), st.floats(0, 0.999))
    def test_never_empty(self, n, tau):
        assert 1 <= kept_count(n, tau) <= n


class TestPauseConfig:
    def test_rejects_tau_one(self):
        with pytest.raises(ConfigError):
            PauseConfig.of({3: 1.0})

    def test_rejects_unsorted(self):
        with pytest.raises(ConfigError):
            PauseConfig(((5, 0.2), (3, 0.2)))

    def test_rejects_layer_zero(self):
        with pytest.raises(ConfigError):
            PauseConfig.of({0: 0.2})

    def test_rejects_layer_past_depth(self, tiny_config, tiny_params, tiny_images):
        with pytest.raises(ConfigError):
            forward_with_pausing(tiny_images, tiny_params, tiny_config, {5: 0.2})

    def test_json_roundtrip(self):
        cfg = PauseConfig.of({3: 0.4, 5: 0.2})
        assert PauseConfig.from_json(cfg.to_json()) == cfg
        assert cfg.config_id == "3:0.4+5:0.2"
        assert PauseConfig().config_id == "none"

    def test_json_rejects_unknown_key(self):
        with pytest.raises(ConfigError):
            PauseConfig.from_json('[{"layer": 3, "tau": 0.2, "extra": 1}]')


def _manual_assemble(x_final, state):
    """Reference reassembly through original indices, one token at a time."""
    b = x_final.shape[0]
    origin = state.original_indices()
    out = np.full((b, state.num_tokens, x_final.shape[2]), np.nan)
    for stage, orig in zip(state.stages, origin):
        snap = stage.snapshot.data
        for bi in range(b):
            kept = set(stage.keep[bi].tolist())
            for j in range(snap.shape[1]):
                if j not in kept:
                    out[bi, orig[bi, j]] = snap[bi, j]
    for bi in range(b):
        for j, o in enumerate(origin[-1][bi] if origin else range(state.num_tokens)):
            out[bi, o] = x_final.data[bi, j]
    return out


class TestAssembler:
    def test_conservation_every_token_once(self, rng):
        # Tokens carry their own original index; paused and processed sets must tile [0, N).
        n, d = 30, 1
        x = Tensor(np.arange(n, dtype=float).reshape(1, n, d).repeat(2, axis=0))
        state = PauseState(n)
        params = {"aux.weight": Tensor(rng.normal(size=(d, 3))), "aux.bias": Tensor(np.zeros(3))}
        for tau in (0.3, 0.5, 0.2):
            x = pause_step(x, tau, params, state, selection="random", rng=rng)
        out = assemble(x, state).data[..., 0]
        np.testing.assert_array_equal(out, np.broadcast_to(np.arange(n), (2, n)))

    def test_processed_tokens_win(self, rng):
        n = 12
        x0 = Tensor(rng.normal(size=(2, n, 4)))
        state = PauseState(n)
        params = {"aux.weight": Tensor(rng.normal(size=(4, 3))), "aux.bias": Tensor(np.zeros(3))}
        x = pause_step(x0, 0.5, params, state)
        x = nx.add(x, 100.0)
        x = pause_step(x, 0.5, params, state)
        x = nx.add(x, 1000.0)
        np.testing.assert_array_equal(assemble(x, state).data, _manual_assemble(x, state))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.lists(st.floats(0, 0.95), min_size=0, max_size=4))
    def test_manual_oracle(self, seed, taus):
        r = np.random.default_rng(seed)
        n = int(r.integers(1, 25))
        x = Tensor(r.normal(size=(2, n, 3)))
        params = {"aux.weight": Tensor(r.normal(size=(3, 4))), "aux.bias": Tensor(np.zeros(4))}
        state = PauseState(n)
        for tau in taus:
            x = pause_step(x, tau, params, state)
            x = nx.scale(x, 2.0)
        np.testing.assert_array_equal(assemble(x, state).data, _manual_assemble(x, state))

    def test_wrong_width(self, rng):
        state = PauseState(6)
        params = {"aux.weight": Tensor(rng.normal(size=(2, 3))), "aux.bias": Tensor(np.zeros(3))}
        pause_step(Tensor(rng.normal(size=(1, 6, 2))), 0.5, params, state)
        with pytest.raises(nx.ContractError):
            assemble(Tensor(np.zeros((1, 4, 2))), state)


class TestPausedForward:
    def test_tau_zero_bitwise_identity(self, tiny_config, tiny_params, tiny_images):
        ref = forward_full(tiny_images, tiny_params, tiny_config).data
        for cfg in ({1: 0.0}, {2: 0.0, 4: 0.0}):
            out, stats = forward_with_pausing(tiny_images, tiny_params, tiny_config, cfg)
            assert np.array_equal(out.data, ref)
            assert stats.token_layer_products == 16 * 4

    def test_active_counts_single_stage(self):
        cfg = ModelConfig(40, 40, 4, 8, 12, 2, 3, decoder_kind="linear")
        params = init_params(cfg, 0)
        img = np.random.default_rng(0).random((1, 40, 40, 3))
        with nx.no_grad():
            _, stats = forward_with_pausing(img, params, cfg, {3: 0.2})
        assert stats.per_layer_active == [100] * 3 + [80] * 9

    def test_active_counts_two_stage_compound(self):
        cfg = ModelConfig(40, 40, 4, 8, 12, 2, 3, decoder_kind="linear")
        params = init_params(cfg, 0)
        img = np.random.default_rng(0).random((1, 40, 40, 3))
        with nx.no_grad():
            _, stats = forward_with_pausing(img, params, cfg, {3: 0.2, 5: 0.2})
        assert stats.per_layer_active == [100] * 3 + [80] * 2 + [64] * 7

    def test_paused_tokens_frozen(self, tiny_config, tiny_params, tiny_images):
        # A token paused after layer 1 reaches the decoder with its layer-1 value.
        x, state, _ = encode_with_pausing(tiny_images, tiny_params, tiny_config, {1: 0.5})
        full = assemble(x, state).data
        snap = state.stages[0].snapshot.data
        for b in range(2):
            paused = sorted(set(range(16)) - set(state.stages[0].keep[b].tolist()))
            assert len(paused) == 8
            np.testing.assert_array_equal(full[b, paused], snap[b, paused])

    def test_paused_are_lowest_entropy(self, tiny_config, tiny_params, tiny_images):
        _, state, _ = encode_with_pausing(tiny_images, tiny_params, tiny_config, {2: 0.25})
        stage = state.stages[0]
        h = token_entropy(stage.aux_logits)
        for b in range(2):
            kept = stage.keep[b]
            paused = np.setdiff1d(np.arange(16), kept)
            assert h[b, paused].max() <= h[b, kept].min()

    def test_random_selection_is_seeded(self, tiny_config, tiny_params, tiny_images):
        a, _ = forward_with_pausing(tiny_images, tiny_params, tiny_config, {2: 0.5},
                                    selection="random", rng=np.random.default_rng(3))
        b, _ = forward_with_pausing(tiny_images, tiny_params, tiny_config, {2: 0.5},
                                    selection="random", rng=np.random.default_rng(3))
        assert np.array_equal(a.data, b.data)

    def test_random_selection_needs_rng(self, tiny_config, tiny_params, tiny_images):
        with pytest.raises(ConfigError):
            forward_with_pausing(tiny_images, tiny_params, tiny_config, {2: 0.5}, selection="random")


class TestEarlyExit:
    def test_no_pausing_matches_decoder(self, tiny_config, tiny_params, tiny_images):
        tok, exit_layer = early_exit_token_logits(tiny_images, tiny_params, tiny_config, {})
        x, _, _ = encode_with_pausing(tiny_images, tiny_params, tiny_config, {})
        np.testing.assert_array_equal(tok.data, decode_tokens(x, tiny_params, tiny_config).data)
        assert not exit_layer.any()

    def test_bookkeeping(self, tiny_config, tiny_params, tiny_images):
        cfg = {1: 0.25, 3: 0.5}
        tok, exit_layer = early_exit_token_logits(tiny_images, tiny_params, tiny_config, cfg)
        x, state, _ = encode_with_pausing(tiny_images, tiny_params, tiny_config, cfg, keep_aux=True)
        origin = state.original_indices()
        main = decode_tokens(x, tiny_params, tiny_config).data
        for b in range(2):
            assert (exit_layer[b] == 1).sum() == 4
            assert (exit_layer[b] == 3).sum() == 6
            assert (exit_layer[b] == 0).sum() == 6
            for stage, orig in zip(state.stages, origin):
                for j in range(stage.snapshot.shape[1]):
                    if j not in stage.keep[b]:
                        np.testing.assert_array_equal(tok.data[b, orig[b, j]], stage.aux_logits.data[b, j])
            np.testing.assert_array_equal(tok.data[b, origin[-1][b]], main[b])

    def test_pixel_output_shape(self, tiny_config, tiny_params, tiny_images):
        out = forward_early_exit(tiny_images, tiny_params, tiny_config, {2: 0.5})
        assert out.shape == (2, 16, 16, 3)


def test_paused_gradient_flows_through_aux(tiny_config, tiny_params, tiny_images):
    # Paused tokens bypass later layers, so the last layer's weights see fewer tokens
    # but the embedding still receives gradient from every token.
    out, _ = forward_with_pausing(tiny_images, tiny_params, tiny_config, {1: 0.5})
    nx.backward(nx.sum(out))
    assert np.abs(tiny_params["embed.weight"].grad).sum() > 0
    assert np.abs(tiny_params["enc.4.ffn.fc1.weight"].grad).sum() > 0
