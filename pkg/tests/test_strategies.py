"""Aggregation strategies against hand values and independent oracles."""

import math

import numpy as np
import pytest

from fedbench import (
    ClientUpdate,
    ConfigError,
    ProtocolError,
    ShapeError,
    Strategy,
    StrategyConfig,
    aggregate_dp,
    aggregate_fedadagrad,
    aggregate_fedadam,
    aggregate_fedavg,
    aggregate_fedavgm,
    aggregate_fedmedian,
    aggregate_fedprox,
    dp_clip,
    pseudo_gradient,
)
from fedbench.strategies import initial_state


def updates_from(w_t, deltas, num_samples=None):
    deltas = [np.asarray(d, dtype=np.float64) for d in deltas]
    if num_samples is None:
        num_samples = [1] * len(deltas)
    return [
        ClientUpdate(client_id=i, new_params=w_t + d, num_samples=n)
        for i, (d, n) in enumerate(zip(deltas, num_samples))
    ]


def updates_with_params(params_list, num_samples=None):
    if num_samples is None:
        num_samples = [1] * len(params_list)
    return [
        ClientUpdate(client_id=i, new_params=np.asarray(p, dtype=np.float64), num_samples=n)
        for i, (p, n) in enumerate(zip(params_list, num_samples))
    ]


def naive_weighted_mean(params_list, num_samples):
    """Per-coordinate python-float accumulation, the brute-force oracle."""
    total = float(sum(num_samples))
    dim = len(params_list[0])
    out = np.zeros(dim)
    weights = [n / total for n in num_samples]
    for j in range(dim):
        acc = 0.0
        for w, p in zip(weights, params_list):
            acc += w * float(p[j])
        out[j] = acc
    return out


def sort_median(params_list):
    """Full-sort per-coordinate median oracle; even counts average the middle."""
    stacked = np.stack(params_list)
    out = np.zeros(stacked.shape[1])
    for j in range(stacked.shape[1]):
        column = sorted(float(v) for v in stacked[:, j])
        k = len(column)
        if k % 2 == 1:
            out[j] = column[k // 2]
        else:
            out[j] = (column[k // 2 - 1] + column[k // 2]) / 2.0
    return out


class TestFedAvg:
    def test_single_client_identity(self):
        w_t = np.zeros(2)
        updates = updates_with_params([[1.0, -2.0]], [5])
        assert np.array_equal(aggregate_fedavg(w_t, updates), [1.0, -2.0])

    def test_weighted_mean_arithmetic(self):
        w_t = np.zeros(1)
        updates = updates_with_params([[0.0], [2.0]], [1, 3])
        assert aggregate_fedavg(w_t, updates)[0] == 1.5

    def test_matches_naive_loop_oracle(self):
        rng = np.random.default_rng(17)
        w_t = rng.normal(size=20)
        params = [rng.normal(size=20) for _ in range(5)]
        ns = [int(n) for n in rng.integers(1, 50, size=5)]
        result = aggregate_fedavg(w_t, updates_with_params(params, ns))
        oracle = naive_weighted_mean(params, ns)
        assert np.max(np.abs(result - oracle)) <= 1e-12

    def test_equals_global_plus_pseudo_gradient(self):
        rng = np.random.default_rng(3)
        w_t = rng.normal(size=10)
        updates = updates_with_params([rng.normal(size=10) for _ in range(4)],
                                      [3, 1, 7, 2])
        avg = aggregate_fedavg(w_t, updates)
        via_delta = w_t + pseudo_gradient(w_t, updates)
        np.testing.assert_allclose(avg, via_delta, atol=1e-12)

    def test_empty_updates_rejected(self):
        with pytest.raises(ProtocolError):
            aggregate_fedavg(np.zeros(2), [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="client 0"):
            aggregate_fedavg(np.zeros(2), updates_with_params([[1.0, 2.0, 3.0]]))

    def test_scale_equivariance(self):
        rng = np.random.default_rng(8)
        params = [rng.normal(size=12) for _ in range(6)]
        ns = [int(n) for n in rng.integers(1, 9, size=6)]
        c = 3.7
        base = aggregate_fedavg(np.zeros(12), updates_with_params(params, ns))
        scaled = aggregate_fedavg(
            np.zeros(12), updates_with_params([c * p for p in params], ns)
        )
        np.testing.assert_allclose(scaled, c * base, rtol=1e-12)


class TestFedAvgM:
    def cfg(self, beta, lr):
        return StrategyConfig(kind="fedavgm", momentum=beta, server_lr=lr)

    def test_zero_momentum_reduces_to_fedavg(self):
        rng = np.random.default_rng(4)
        w_t = rng.normal(size=8)
        updates = updates_with_params([rng.normal(size=8) for _ in range(5)],
                                      [2, 5, 1, 1, 3])
        cfg = self.cfg(0.0, 1.0)
        out, _ = aggregate_fedavgm(w_t, updates, initial_state(cfg), cfg)
        np.testing.assert_allclose(out, aggregate_fedavg(w_t, updates), atol=1e-12)

    def test_first_round(self):
        w_t = np.zeros(1)
        cfg = self.cfg(0.9, 0.5)
        out, state = aggregate_fedavgm(
            w_t, updates_from(w_t, [[1.0]]), initial_state(cfg), cfg
        )
        assert state.momentum_buffer[0] == 1.0
        assert out[0] == 0.5

    def test_two_round_hand_recursion(self):
        # Constant delta of 1: v1 = 1, v2 = 1.9, w2 = 1 + 1.9 = 2.9.
        cfg = self.cfg(0.9, 1.0)
        state = initial_state(cfg)
        w = np.zeros(1)
        for _ in range(2):
            w, state = aggregate_fedavgm(w, updates_from(w, [[1.0]]), state, cfg)
        assert abs(w[0] - 2.9) < 1e-12
        assert state.round_index == 2


class TestFedAdam:
    def test_zero_delta_fixed_point(self):
        cfg = StrategyConfig(kind="fedadam")
        w_t = np.array([1.0, -1.0])
        out, _ = aggregate_fedadam(
            w_t, updates_from(w_t, [[0.0, 0.0]]), initial_state(cfg), cfg
        )
        assert np.array_equal(out, w_t)

    def test_first_round_hand_values(self):
        cfg = StrategyConfig(
            kind="fedadam", adam_beta1=0.9, adam_beta2=0.99,
            server_lr=0.1, adaptivity=1e-9,
        )
        w_t = np.zeros(1)
        out, state = aggregate_fedadam(
            w_t, updates_from(w_t, [[1.0]]), initial_state(cfg), cfg
        )
        assert abs(state.first_moment[0] - 0.1) < 1e-15
        assert abs(state.second_moment[0] - 0.01) < 1e-15
        assert abs(out[0] - 0.1) < 1e-8


class TestFedAdagrad:
    def test_annealing_closed_form(self):
        # With beta1=0 and constant delta 1, the step at round r is lr/(sqrt(r)+tau).
        cfg = StrategyConfig(kind="fedadagrad", adam_beta1=0.0,
                             server_lr=1.0, adaptivity=1e-3)
        state = initial_state(cfg)
        w = np.zeros(1)
        previous = w[0]
        steps = []
        for r in range(1, 6):
            w, state = aggregate_fedadagrad(w, updates_from(w, [[1.0]]), state, cfg)
            step = w[0] - previous
            assert abs(step - 1.0 / (math.sqrt(r) + 1e-3)) < 1e-12
            steps.append(step)
            previous = w[0]
        assert all(a > b for a, b in zip(steps, steps[1:]))

    def test_first_round_hand_values(self):
        cfg = StrategyConfig(kind="fedadagrad", adam_beta1=0.0,
                             server_lr=0.1, adaptivity=1e-9)
        w_t = np.zeros(1)
        out, state = aggregate_fedadagrad(
            w_t, updates_from(w_t, [[2.0]]), initial_state(cfg), cfg
        )
        assert abs(state.second_moment[0] - 4.0) < 1e-15
        assert abs(out[0] - 0.1) < 1e-8

    def test_zero_first_round_keeps_state_zero(self):
        cfg = StrategyConfig(kind="fedadagrad")
        w_t = np.array([2.0])
        out, state = aggregate_fedadagrad(
            w_t, updates_from(w_t, [[0.0]]), initial_state(cfg), cfg
        )
        assert np.array_equal(out, w_t)
        assert state.second_moment[0] == 0.0
        assert state.round_index == 1


def scalar_recurrence_trajectory(kind, w0, per_round_updates, cfg):
    """Independent per-coordinate reimplementation of the server recurrences.

    per_round_updates: list of rounds, each a list of (params, num_samples).
    Pure python floats throughout.
    """
    dim = len(w0)
    w = [float(v) for v in w0]
    m = [0.0] * dim
    v2 = [0.0] * dim
    trajectory = []
    for round_updates in per_round_updates:
        total = float(sum(n for _, n in round_updates))
        for j in range(dim):
            delta = 0.0
            for params, n in round_updates:
                delta += (n / total) * (float(params[j]) - w[j])
            m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * delta
            if kind == "fedadagrad":
                v2[j] = v2[j] + delta * delta
            else:
                v2[j] = cfg.adam_beta2 * v2[j] + (1.0 - cfg.adam_beta2) * delta * delta
            w[j] = w[j] + cfg.lr * m[j] / (math.sqrt(v2[j]) + cfg.adaptivity)
        trajectory.append(list(w))
    return trajectory


@pytest.mark.parametrize("kind", ["fedadam", "fedadagrad"])
def test_adaptive_five_round_trajectory_matches_scalar_oracle(kind):
    rng = np.random.default_rng(99)
    dim = 7
    cfg = StrategyConfig(kind=kind, server_lr=0.3, adam_beta1=0.9,
                         adam_beta2=0.99, adaptivity=1e-3)
    aggregate = aggregate_fedadam if kind == "fedadam" else aggregate_fedadagrad

    w_start = rng.normal(size=dim)
    w = w_start.copy()
    state = initial_state(cfg)
    per_round = []
    trajectory = []
    for _ in range(5):
        params = [w + rng.normal(scale=0.5, size=dim) for _ in range(4)]
        ns = [int(n) for n in rng.integers(1, 10, size=4)]
        per_round.append(list(zip([p.copy() for p in params], ns)))
        w, state = aggregate(w, updates_with_params(params, ns), state, cfg)
        trajectory.append(w.copy())

    # Oracle consumes the recorded raw client params, not the implementation's deltas.
    oracle = scalar_recurrence_trajectory(kind, w_start, per_round, cfg)
    for ours, theirs in zip(trajectory, oracle):
        assert np.max(np.abs(ours - np.array(theirs))) <= 1e-12


class TestFedMedian:
    def test_odd_count_ignores_outlier(self):
        out = aggregate_fedmedian(
            np.zeros(1), updates_with_params([[1.0], [2.0], [100.0]])
        )
        assert out[0] == 2.0

    def test_even_count_averages_middle(self):
        out = aggregate_fedmedian(np.zeros(1), updates_with_params([[1.0], [3.0]]))
        assert out[0] == 2.0

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(21)
        params = [rng.normal(size=50) for _ in range(20)]
        result = aggregate_fedmedian(np.zeros(50), updates_with_params(params))
        assert np.array_equal(result, sort_median(params))

    def test_weights_ignored(self):
        params = [[0.0], [10.0], [20.0]]
        a = aggregate_fedmedian(np.zeros(1), updates_with_params(params, [1, 1, 1]))
        b = aggregate_fedmedian(np.zeros(1), updates_with_params(params, [100, 1, 1]))
        assert a[0] == b[0] == 10.0

    def test_breakdown_bounded_by_honest_values(self):
        rng = np.random.default_rng(31)
        for _ in range(25):
            k = int(rng.integers(3, 12))
            honest = [rng.normal(size=6) for _ in range(k - 1)]
            attacker = rng.normal(scale=1e6, size=6)
            out = aggregate_fedmedian(
                np.zeros(6), updates_with_params(honest + [attacker])
            )
            lo = np.min(np.stack(honest), axis=0)
            hi = np.max(np.stack(honest), axis=0)
            assert np.all(out >= lo) and np.all(out <= hi)


class TestFedProx:
    def test_server_side_is_fedavg(self):
        rng = np.random.default_rng(41)
        w_t = rng.normal(size=9)
        updates = updates_with_params([rng.normal(size=9) for _ in range(4)],
                                      [1, 2, 3, 4])
        assert np.array_equal(
            aggregate_fedprox(w_t, updates), aggregate_fedavg(w_t, updates)
        )

    def test_strategy_carries_mu_to_clients(self):
        strategy = Strategy(StrategyConfig(kind="fedprox", prox_mu=0.25))
        assert strategy.client_prox_mu == 0.25
        assert Strategy(StrategyConfig(kind="fedavg", prox_mu=0.25)).client_prox_mu == 0.0


class TestDpClip:
    def test_scales_above_threshold(self):
        delta = np.array([6.0, 8.0])  # norm 10
        clipped, was_below = dp_clip(delta, 5.0)
        assert not was_below
        np.testing.assert_allclose(clipped, [3.0, 4.0])

    def test_identity_below_threshold(self):
        delta = np.array([3.0, 0.0])
        clipped, was_below = dp_clip(delta, 5.0)
        assert was_below
        assert np.array_equal(clipped, delta)

    def test_clipped_norm_never_exceeds_bound(self):
        rng = np.random.default_rng(51)
        for _ in range(200):
            delta = rng.normal(scale=rng.uniform(0.01, 10), size=int(rng.integers(1, 30)))
            clip = float(rng.uniform(0.01, 5))
            clipped, _ = dp_clip(delta, clip)
            assert np.linalg.norm(clipped) <= clip + 1e-12


class TestDpAggregate:
    def cfg(self, **kw):
        defaults = dict(kind="dp", dp_noise_multiplier=1.0, dp_target_quantile=0.5,
                        dp_clip_lr=0.2, dp_initial_clip=1.0)
        defaults.update(kw)
        return StrategyConfig(**defaults)

    def test_no_noise_huge_clip_equals_uniform_fedavg(self):
        rng = np.random.default_rng(61)
        w_t = rng.normal(size=15)
        params = [rng.normal(size=15) for _ in range(6)]
        cfg = self.cfg(dp_noise_multiplier=0.0, dp_initial_clip=1e9)
        out, _ = aggregate_dp(
            w_t, updates_with_params(params, [9, 1, 4, 2, 2, 7]),
            initial_state(cfg), cfg, np.random.default_rng(0),
        )
        uniform = aggregate_fedavg(w_t, updates_with_params(params))
        assert np.max(np.abs(out - uniform)) <= 1e-12

    def test_clip_update_closed_form(self):
        # All clients below threshold: C' = C * exp(-0.2 * (1 - 0.5)).
        cfg = self.cfg()
        w_t = np.zeros(3)
        updates = updates_from(w_t, [[0.1, 0.0, 0.0]] * 4)
        _, state = aggregate_dp(
            w_t, updates, initial_state(cfg), cfg, np.random.default_rng(0)
        )
        assert abs(state.clip_norm - math.exp(-0.1)) < 1e-12

    def test_seeded_rng_is_reproducible(self):
        rng_params = np.random.default_rng(71)
        w_t = rng_params.normal(size=10)
        params = [rng_params.normal(size=10) for _ in range(5)]
        cfg = self.cfg()
        a, _ = aggregate_dp(w_t, updates_with_params(params), initial_state(cfg),
                            cfg, np.random.default_rng(1234))
        b, _ = aggregate_dp(w_t, updates_with_params(params), initial_state(cfg),
                            cfg, np.random.default_rng(1234))
        assert np.array_equal(a, b)

    def test_clip_monotone_down_and_up(self):
        cfg = self.cfg()
        w_t = np.zeros(2)
        state = initial_state(cfg)
        history = [state.clip_norm]
        for _ in range(10):  # deltas well below the clip
            _, state = aggregate_dp(
                w_t, updates_from(w_t, [[1e-4, 0.0]] * 3), state, cfg,
                np.random.default_rng(0),
            )
            history.append(state.clip_norm)
        assert all(a > b for a, b in zip(history, history[1:]))

        state = initial_state(cfg)
        history = [state.clip_norm]
        for _ in range(10):  # deltas far above the clip
            _, state = aggregate_dp(
                w_t, updates_from(w_t, [[100.0, 0.0]] * 3), state, cfg,
                np.random.default_rng(0),
            )
            history.append(state.clip_norm)
        assert all(a < b for a, b in zip(history, history[1:]))

    def test_records_pre_clip_norms(self):
        cfg = self.cfg()
        w_t = np.zeros(2)
        updates = updates_from(w_t, [[3.0, 4.0]])
        aggregate_dp(w_t, updates, initial_state(cfg), cfg, np.random.default_rng(0))
        assert abs(updates[0].pre_clip_norm - 5.0) < 1e-12


class TestSharedProperties:
    def strategies(self):
        return [
            ("fedavg", StrategyConfig(kind="fedavg")),
            ("fedavgm", StrategyConfig(kind="fedavgm")),
            ("fedadam", StrategyConfig(kind="fedadam")),
            ("fedadagrad", StrategyConfig(kind="fedadagrad")),
            ("fedmedian", StrategyConfig(kind="fedmedian")),
            ("fedprox", StrategyConfig(kind="fedprox")),
            ("dp", StrategyConfig(kind="dp", dp_noise_multiplier=0.0)),
        ]

    def test_permutation_invariance(self):
        rng = np.random.default_rng(81)
        w_t = rng.normal(size=12)
        params = [rng.normal(size=12) for _ in range(7)]
        ns = [int(n) for n in rng.integers(1, 20, size=7)]
        order = rng.permutation(7)
        for kind, cfg in self.strategies():
            forward = Strategy(cfg).aggregate(
                w_t, updates_with_params(params, ns), rng=np.random.default_rng(0)
            )
            shuffled = Strategy(cfg).aggregate(
                w_t,
                updates_with_params(
                    [params[i] for i in order], [ns[i] for i in order]
                ),
                rng=np.random.default_rng(0),
            )
            np.testing.assert_allclose(forward, shuffled, atol=1e-12, err_msg=kind)

    def test_consensus_fixed_point(self):
        rng = np.random.default_rng(91)
        w_t = rng.normal(size=10)
        updates = updates_with_params([w_t.copy() for _ in range(5)],
                                      [3, 1, 4, 1, 5])
        for kind, cfg in self.strategies():
            out = Strategy(cfg).aggregate(
                w_t, updates, rng=np.random.default_rng(0)
            )
            np.testing.assert_allclose(out, w_t, atol=1e-12, err_msg=kind)

    def test_reduction_chain_to_fedavg(self):
        rng = np.random.default_rng(101)
        w_t = rng.normal(size=30)
        params = [rng.normal(size=30) for _ in range(8)]
        ns = [int(n) for n in rng.integers(1, 12, size=8)]
        reference = aggregate_fedavg(w_t, updates_with_params(params, ns))

        avgm = Strategy(StrategyConfig(kind="fedavgm", momentum=0.0, server_lr=1.0))
        out = avgm.aggregate(w_t, updates_with_params(params, ns))
        assert np.max(np.abs(out - reference)) <= 1e-12

        prox = Strategy(StrategyConfig(kind="fedprox", prox_mu=0.0))
        out = prox.aggregate(w_t, updates_with_params(params, ns))
        assert np.max(np.abs(out - reference)) <= 1e-12

        uniform_reference = aggregate_fedavg(w_t, updates_with_params(params))
        dp = Strategy(StrategyConfig(kind="dp", dp_noise_multiplier=0.0,
                                     dp_initial_clip=1e9))
        out = dp.aggregate(w_t, updates_with_params(params, ns),
                           rng=np.random.default_rng(0))
        assert np.max(np.abs(out - uniform_reference)) <= 1e-12


class TestConfigValidation:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="kind"):
            StrategyConfig(kind="fedkrum").validate()

    def test_bounds(self):
        with pytest.raises(ConfigError):
            StrategyConfig(kind="fedavgm", momentum=1.0).validate()
        with pytest.raises(ConfigError):
            StrategyConfig(kind="dp", dp_target_quantile=0.0).validate()
        with pytest.raises(ConfigError):
            StrategyConfig(kind="dp", dp_initial_clip=0.0).validate()
        with pytest.raises(ConfigError):
            StrategyConfig(kind="fedadam", adaptivity=0.0).validate()

    def test_default_server_lr_by_kind(self):
        assert StrategyConfig(kind="fedadam").lr == 0.1
        assert StrategyConfig(kind="fedadagrad").lr == 0.1
        assert StrategyConfig(kind="fedavgm").lr == 1.0
        assert StrategyConfig(kind="fedavgm", server_lr=0.25).lr == 0.25
