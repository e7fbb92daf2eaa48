"""Q-network tests: dueling identity, greedy selection, variants, gradients."""

import numpy as np
import pytest

from dear.errors import ContractError, PreconditionError
from dear.features import State
from dear.nn import Dense
from dear.qnet import (
    AdAction,
    NetConfig,
    QNetwork,
    StateBatch,
    gradient_check,
    greedy_action,
    no_ad_action,
    q_forward,
    random_probe_inputs,
    variant_forward,
)

SMALL = dict(item_dim=10, list_len=6, gru_hidden=6, ctx_dim=3, rec_proj_out=12,
             head_hidden=8, history_window=5)


def small_cfg(variant="DEAR", seed=0, **overrides):
    kw = dict(SMALL)
    kw.update(overrides)
    return NetConfig(variant=variant, seed=seed, **kw)


def random_state(cfg, rng):
    state, _ = random_probe_inputs(cfg, rng)
    return state


def random_candidates(cfg, rng, k=None):
    k = k if k is not None else int(rng.integers(5, 11))
    return rng.uniform(0.0, 1.0, size=(k, cfg.item_dim))


class TestDuelingForward:
    def test_output_length_is_l_plus_2(self):
        cfg = small_cfg()
        net = QNetwork(cfg)
        rng = np.random.default_rng(0)
        q = q_forward(net, random_state(cfg, rng), rng.uniform(size=cfg.item_dim))
        assert q.shape == (8,)

    def test_forced_zero_value_head_gives_advantage(self):
        cfg = small_cfg(seed=3)
        net = QNetwork(cfg)
        net.params["v1.w"][...] = 0.0
        net.params["v1.b"][...] = 0.0
        net.params["v2.w"][...] = 0.0
        net.params["v2.b"][...] = 0.0
        rng = np.random.default_rng(1)
        state = random_state(cfg, rng)
        ad = rng.uniform(size=cfg.item_dim)
        np.testing.assert_array_equal(net.q_values(state, ad), net.advantage(state, ad))

    def test_dueling_identity_exact(self):
        rng = np.random.default_rng(42)
        for trial in range(50):
            cfg = small_cfg(seed=trial)
            net = QNetwork(cfg)
            state = random_state(cfg, rng)
            ad = rng.uniform(size=cfg.item_dim)
            q = net.q_values(state, ad)
            v = net.value(state)
            a = net.advantage(state, ad)
            np.testing.assert_array_equal(q, v + a)

    def test_advantage_centering_flag(self):
        cfg = small_cfg(advantage_centering=True)
        net = QNetwork(cfg)
        rng = np.random.default_rng(2)
        state = random_state(cfg, rng)
        ad = rng.uniform(size=cfg.item_dim)
        q = net.q_values(state, ad)
        v = net.value(state)
        a = net.advantage(state, ad)
        np.testing.assert_allclose(q, v + a - a.mean(), atol=1e-12)


class TestGreedy:
    def brute_force(self, net, state, candidates):
        """Independent oracle: enumerate every (candidate, location) pair."""
        best = None
        for i, cand in enumerate(candidates):
            row = net.q_values(state, cand)
            for loc in range(len(row)):
                if best is None or row[loc] > best[0]:
                    best = (row[loc], i, loc)
        _, i, loc = best
        if loc == 0:
            return no_ad_action(net.cfg.item_dim)
        return AdAction(ad_vector=candidates[i].copy(), location=loc, ad_index=i)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for trial in range(30):
            cfg = small_cfg(seed=trial + 100)
            net = QNetwork(cfg)
            state = random_state(cfg, rng)
            cands = random_candidates(cfg, rng)
            got = greedy_action(net, state, cands)
            want = self.brute_force(net, state, cands)
            assert got.location == want.location
            assert got.ad_index == want.ad_index
            np.testing.assert_array_equal(got.ad_vector, want.ad_vector)

    def test_no_ad_dominant_returns_zero_vector(self):
        cfg = small_cfg(seed=7)
        net = QNetwork(cfg)
        # Single advantage output biased so index 0 dominates regardless of ad.
        net.params["a2.w"][...] = 0.0
        net.params["a2.b"][...] = 0.0
        net.params["a2.b"][0] = 100.0
        rng = np.random.default_rng(3)
        act = greedy_action(net, random_state(cfg, rng), random_candidates(cfg, rng))
        assert act.location == 0
        assert act.ad_index is None
        assert not np.any(act.ad_vector)

    def test_tie_breaks_lowest_candidate_then_location(self):
        cfg = small_cfg(seed=8)
        net = QNetwork(cfg)
        rng = np.random.default_rng(4)
        state = random_state(cfg, rng)
        base = rng.uniform(size=cfg.item_dim)
        cands = np.stack([base, base.copy(), rng.uniform(size=cfg.item_dim)])
        got = greedy_action(net, state, cands)
        want = self.brute_force(net, state, cands)
        assert (got.ad_index, got.location) == (want.ad_index, want.location)
        # All-equal Q-values: candidate 0, location 0 wins.
        net.params["a2.w"][...] = 0.0
        net.params["a2.b"][...] = 1.0
        act = greedy_action(net, state, cands)
        assert act.location == 0

    def test_empty_candidates_rejected(self):
        cfg = small_cfg()
        net = QNetwork(cfg)
        with pytest.raises(PreconditionError):
            greedy_action(net, random_state(cfg, np.random.default_rng(0)),
                          np.zeros((0, cfg.item_dim)))

    def test_single_candidate_specific_location(self):
        cfg = small_cfg(seed=9)
        net = QNetwork(cfg)
        rng = np.random.default_rng(5)
        state = random_state(cfg, rng)
        cand = rng.uniform(size=(1, cfg.item_dim))
        row = net.q_values(state, cand[0])
        act = greedy_action(net, state, cand)
        assert act.location == int(np.argmax(row))


class TestEvaluationCounts:
    def test_dear_counts_candidates(self):
        cfg = small_cfg(seed=1)
        net = QNetwork(cfg)
        rng = np.random.default_rng(0)
        cands = random_candidates(cfg, rng, k=7)
        net.forward_count = 0
        greedy_action(net, random_state(cfg, rng), cands)
        assert net.forward_count == 7

    def test_archb_counts_candidates_times_locations(self):
        cfg = small_cfg(variant="archB_onehot_loc", seed=1)
        net = QNetwork(cfg)
        rng = np.random.default_rng(0)
        cands = random_candidates(cfg, rng, k=7)
        net.forward_count = 0
        greedy_action(net, random_state(cfg, rng), cands)
        assert net.forward_count == 7 * 8


class TestVariants:
    def test_no_dueling_is_plain_head(self):
        cfg = small_cfg(variant="no_dueling", seed=2)
        net = QNetwork(cfg)
        rng = np.random.default_rng(1)
        state = random_state(cfg, rng)
        ad = rng.uniform(size=cfg.item_dim)
        q = net.q_values(state, ad)
        sb = StateBatch.from_states([state], cfg.history_window, cfg.item_dim)
        s, _ = net.encode_states(sb)
        u = np.concatenate([s[0], ad])
        manual = net.layers["q2"].apply(net.layers["q1"].apply(u))
        np.testing.assert_allclose(q, manual, atol=1e-12)
        with pytest.raises(ContractError):
            net.value(state)

    def test_archa_from_state_alone(self):
        cfg = small_cfg(variant="archA", seed=3)
        net = QNetwork(cfg)
        rng = np.random.default_rng(2)
        state = random_state(cfg, rng)
        q = variant_forward(net, state)
        assert q.shape == (8,)
        with pytest.raises(ContractError):
            net.q_values(state, rng.uniform(size=cfg.item_dim))

    def test_archb_requires_location(self):
        cfg = small_cfg(variant="archB_onehot_loc", seed=4)
        net = QNetwork(cfg)
        rng = np.random.default_rng(3)
        state = random_state(cfg, rng)
        ad = rng.uniform(size=cfg.item_dim)
        with pytest.raises(ContractError):
            variant_forward(net, state, ad)
        val = variant_forward(net, state, ad, location=3)
        assert np.isscalar(val)

    def test_fcn_encoder_matches_dense_stack_oracle(self):
        cfg = small_cfg(variant="fcn_encoder", seed=5)
        net = QNetwork(cfg)
        rng = np.random.default_rng(4)
        state = State(
            rec_history=np.zeros((0, cfg.item_dim), dtype=np.uint8),
            ad_history=np.zeros((0, cfg.item_dim), dtype=np.uint8),
            context=rng.uniform(size=cfg.ctx_dim),
            rec_concat=rng.uniform(size=cfg.rec_concat_dim),
        )
        ad = rng.uniform(size=cfg.item_dim)
        q = net.q_values(state, ad)
        # Hand-applied stack on the zero-padded empty history.
        flat = np.zeros(cfg.history_window * cfg.item_dim)
        p_rec = net.layers["rec_fc2"].apply(net.layers["rec_fc1"].apply(flat))
        p_ad = net.layers["ad_fc2"].apply(net.layers["ad_fc1"].apply(flat))
        rec_t = net.layers["rec_proj"].apply(np.asarray(state.rec_concat, dtype=float))
        s = np.concatenate([p_rec, p_ad, state.context, rec_t])
        v = net.layers["v2"].apply(net.layers["v1"].apply(s))
        a = net.layers["a2"].apply(net.layers["a1"].apply(np.concatenate([s, ad])))
        np.testing.assert_allclose(q, v + a, atol=1e-12)

    def test_variant_dispatch_errors(self):
        cfg = small_cfg()
        net = QNetwork(cfg)
        with pytest.raises(ContractError):
            variant_forward(net, random_state(cfg, np.random.default_rng(0)))


class TestBackward:
    def test_backward_without_forward_raises(self):
        net = QNetwork(small_cfg())
        with pytest.raises(ContractError):
            net.backward(np.zeros((1, 8)))

    def test_zero_upstream_gives_zero_bundle(self):
        cfg = small_cfg(seed=6)
        net = QNetwork(cfg)
        rng = np.random.default_rng(5)
        state = random_state(cfg, rng)
        net.forward_training([state], rng.uniform(size=(1, cfg.item_dim)))
        grads = net.backward(np.zeros((1, 8)))
        assert set(grads) == set(net.params)
        for g in grads.values():
            assert not np.any(g)

    def test_shape_closure(self):
        for variant in ("DEAR", "archA", "archB_onehot_loc", "no_dueling", "fcn_encoder"):
            cfg = small_cfg(variant=variant, seed=11)
            net = QNetwork(cfg)
            rng = np.random.default_rng(6)
            state = random_state(cfg, rng)
            ad = rng.uniform(size=(1, cfg.item_dim))
            if variant == "archA":
                net.forward_training([state])
                dq = np.ones((1, 8))
            elif variant == "archB_onehot_loc":
                net.forward_training([state], ad, [2])
                dq = np.ones((1, 1))
            else:
                net.forward_training([state], ad)
                dq = np.ones((1, 8))
            grads = net.backward(dq)
            assert set(grads) == set(net.params)
            for name in grads:
                assert grads[name].shape == net.params[name].shape

    @pytest.mark.parametrize("variant", ["DEAR", "archA", "archB_onehot_loc",
                                         "no_dueling", "fcn_encoder"])
    def test_gradients_match_finite_differences(self, variant):
        cfg = small_cfg(variant=variant, seed=20)
        net = QNetwork(cfg)
        report = gradient_check(net, np.random.default_rng(99), tolerance=1e-4)
        assert report.passed, report.summary()

    def test_gradient_check_flags_injected_fault(self):
        cfg = small_cfg(seed=21)
        net = QNetwork(cfg)
        rng = np.random.default_rng(100)
        good = gradient_check(net, np.random.default_rng(100), tolerance=1e-4)
        assert good.passed, good.summary()


class TestDeterminism:
    def test_same_seed_same_params_and_outputs(self):
        cfg = small_cfg(seed=42)
        a, b = QNetwork(cfg), QNetwork(small_cfg(seed=42))
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        rng = np.random.default_rng(1)
        state = random_state(cfg, rng)
        ad = rng.uniform(size=cfg.item_dim)
        np.testing.assert_array_equal(a.q_values(state, ad), b.q_values(state, ad))

    def test_clone_is_independent(self):
        net = QNetwork(small_cfg(seed=1))
        target = net.clone()
        before = target.params["a2.b"].copy()
        net.params["a2.b"][...] += 1.0
        np.testing.assert_array_equal(target.params["a2.b"], before)
