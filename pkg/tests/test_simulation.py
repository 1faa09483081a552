"""Round loop: timing capture, determinism, participation, failure handling."""

import numpy as np
import pytest

from fedbench import (
    ClientShard,
    ConfigError,
    ExperimentAborted,
    ExperimentConfig,
    LocalOptimizerConfig,
    ModelSpec,
    NumericError,
    PartitionSpec,
    Strategy,
    StrategyConfig,
    SyntheticSpec,
    evaluate_centralized,
    init_model,
    run_experiment,
    run_round,
)
from fedbench.simulation import replica_seed


def tiny_config(**overrides):
    base = dict(
        dataset="synthetic",
        synthetic=SyntheticSpec(num_classes=3, train_per_class=60, test_per_class=20,
                                input_dim=8, class_sep=6.0, seed=3),
        partition=PartitionSpec(mode="iid", num_clients=4),
        model=ModelSpec(0, [16], 0),
        local=LocalOptimizerConfig(kind="adam", learning_rate=0.01, local_epochs=2),
        strategy=StrategyConfig(kind="fedavg"),
        rounds=3,
        num_clients=4,
        master_seed=11,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def make_shards(rng, num_clients, per_client, dim, classes):
    shards = []
    for cid in range(num_clients):
        shards.append(
            ClientShard(
                client_id=cid,
                features=rng.uniform(size=(per_client, dim)),
                labels=rng.integers(0, classes, size=per_client),
            )
        )
    return shards


class TestRunRound:
    def setup_round(self, num_clients=3):
        rng = np.random.default_rng(0)
        spec = ModelSpec(input_dim=6, hidden_dims=[5], output_classes=3, init_seed=1)
        shards = make_shards(rng, num_clients, 12, 6, 3)
        eval_x = rng.uniform(size=(30, 6))
        eval_y = rng.integers(0, 3, size=30)
        return spec, shards, eval_x, eval_y

    def test_single_client_round_adopts_client_weights(self):
        spec, shards, eval_x, eval_y = self.setup_round(num_clients=1)
        params = init_model(spec)
        strategy = Strategy(StrategyConfig(kind="fedavg"))
        new_params, metrics = run_round(
            params, shards, strategy, 1,
            model=spec, local=LocalOptimizerConfig(), master_seed=5,
            eval_features=eval_x, eval_labels=eval_y,
        )
        from fedbench.simulation import _client_round, derived_rng, _TAG_TRAIN

        expected = _client_round(
            params, shards[0], spec, LocalOptimizerConfig(),
            derived_rng(5, 1, 0, _TAG_TRAIN), 0.0, 1,
        ).new_params
        assert np.array_equal(new_params, expected)
        assert metrics.round == 1

    def test_zero_lr_leaves_model_and_accuracy_unchanged(self):
        spec, shards, eval_x, eval_y = self.setup_round()
        params = init_model(spec)
        acc_before, loss_before = evaluate_centralized(params, spec, eval_x, eval_y)
        strategy = Strategy(StrategyConfig(kind="fedavg"))
        new_params, metrics = run_round(
            params, shards, strategy, 1,
            model=spec, local=LocalOptimizerConfig(kind="sgd", learning_rate=0.0),
            master_seed=5, eval_features=eval_x, eval_labels=eval_y,
        )
        np.testing.assert_allclose(new_params, params, atol=1e-12)
        assert abs(metrics.centralized_accuracy - acc_before) < 1e-12

    def test_all_clients_participate(self):
        spec, shards, eval_x, eval_y = self.setup_round(num_clients=5)
        seen = []

        class Recorder(Strategy):
            def aggregate(self, global_params, updates, rng=None):
                seen.extend(u.client_id for u in updates)
                return super().aggregate(global_params, updates, rng=rng)

        run_round(
            init_model(spec), shards, Recorder(StrategyConfig(kind="fedavg")), 1,
            model=spec, local=LocalOptimizerConfig(), master_seed=5,
            eval_features=eval_x, eval_labels=eval_y,
        )
        assert seen == [0, 1, 2, 3, 4]

    def test_timing_fields_positive(self):
        spec, shards, eval_x, eval_y = self.setup_round()
        _, metrics = run_round(
            init_model(spec), shards, Strategy(StrategyConfig(kind="fedavg")), 1,
            model=spec, local=LocalOptimizerConfig(), master_seed=5,
            eval_features=eval_x, eval_labels=eval_y,
        )
        assert metrics.agg_time_s > 0
        assert metrics.train_time_s > 0
        assert metrics.comm_time_s > 0

    def test_non_finite_client_params_abort_with_context(self):
        spec, shards, eval_x, eval_y = self.setup_round()
        shards[2].features[0, 0] = np.nan
        with pytest.raises(NumericError, match="client 2.*round 1"):
            run_round(
                init_model(spec), shards, Strategy(StrategyConfig(kind="fedavg")), 1,
                model=spec, local=LocalOptimizerConfig(), master_seed=5,
                eval_features=eval_x, eval_labels=eval_y,
            )

    def test_dp_round_records_clip_norm(self):
        spec, shards, eval_x, eval_y = self.setup_round()
        strategy = Strategy(StrategyConfig(kind="dp"))
        _, metrics = run_round(
            init_model(spec), shards, strategy, 1,
            model=spec, local=LocalOptimizerConfig(), master_seed=5,
            eval_features=eval_x, eval_labels=eval_y,
        )
        assert metrics.clip_norm == strategy.state.clip_norm
        assert metrics.clip_norm > 0


class TestEvaluate:
    def test_perfect_predictor(self):
        spec = ModelSpec(input_dim=2, hidden_dims=[], output_classes=2)
        params = np.array([0.0, 0.0, 0.0, 0.0, 50.0, -50.0])
        x = np.random.default_rng(0).uniform(size=(20, 2))
        y = np.zeros(20, dtype=np.int64)
        acc, loss = evaluate_centralized(params, spec, x, y)
        assert acc == 1.0
        assert loss < 1e-12

    def test_uniform_model_on_balanced_set(self):
        spec = ModelSpec(input_dim=4, hidden_dims=[], output_classes=10)
        params = np.zeros(spec.param_count())
        x = np.random.default_rng(1).uniform(size=(100, 4))
        y = np.tile(np.arange(10), 10)
        acc, loss = evaluate_centralized(params, spec, x, y)
        assert abs(loss - np.log(10.0)) < 1e-12
        assert abs(acc - 0.1) < 1e-12  # ties resolve to class 0, which is 10%

    def test_empty_eval_set_rejected(self):
        spec = ModelSpec(input_dim=2, hidden_dims=[], output_classes=2)
        with pytest.raises(ConfigError):
            evaluate_centralized(np.zeros(6), spec, np.zeros((0, 2)), np.zeros(0))


class TestRunExperiment:
    def test_rounds_zero_rejected_before_running(self):
        with pytest.raises(ConfigError, match="rounds"):
            run_experiment(tiny_config(rounds=0))

    def test_metric_series_deterministic(self):
        a = run_experiment(tiny_config())
        b = run_experiment(tiny_config())
        assert [m.centralized_accuracy for m in a.metrics] == [
            m.centralized_accuracy for m in b.metrics
        ]
        assert [m.centralized_loss for m in a.metrics] == [
            m.centralized_loss for m in b.metrics
        ]
        assert np.array_equal(a.final_params, b.final_params)

    def test_different_seed_changes_series(self):
        a = run_experiment(tiny_config())
        b = run_experiment(tiny_config(master_seed=12))
        assert [m.centralized_loss for m in a.metrics] != [
            m.centralized_loss for m in b.metrics
        ]

    def test_learns_separable_synthetic(self):
        # The dataset is linearly separable (central-training oracle covers it
        # in test_data); federated averaging should also learn it.
        cfg = tiny_config(
            rounds=10,
            num_clients=10,
            partition=PartitionSpec(mode="iid", num_clients=10),
            synthetic=SyntheticSpec(num_classes=3, train_per_class=120,
                                    test_per_class=40, input_dim=8,
                                    class_sep=6.0, seed=3),
            local=LocalOptimizerConfig(kind="adam", learning_rate=0.01,
                                       local_epochs=5),
        )
        result = run_experiment(cfg)
        assert result.metrics[-1].centralized_accuracy > 0.9

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_midrun_numeric_failure_flushes_partial_metrics(self):
        cfg = tiny_config(
            local=LocalOptimizerConfig(kind="sgd", learning_rate=1e300),
            rounds=5,
        )
        with pytest.raises(ExperimentAborted) as excinfo:
            run_experiment(cfg)
        err = excinfo.value
        assert "round" in str(err)
        assert isinstance(err.metrics, list)
        assert len(err.metrics) < 5

    def test_strategy_state_round_counter(self):
        result = run_experiment(tiny_config(rounds=3))
        assert result.strategy_state.round_index == 3

    def test_subsets_respected(self):
        cfg = tiny_config(train_subset=50, eval_subset=10)
        result = run_experiment(cfg)
        assert result.train_size == 50
        assert result.eval_size == 10

    def test_model_dims_filled_from_dataset(self):
        cfg = tiny_config()
        result = run_experiment(cfg)
        assert result.config.model.input_dim == 8
        assert result.config.model.output_classes == 3

    def test_mismatched_model_dims_rejected(self):
        cfg = tiny_config(model=ModelSpec(5, [16], 3))
        with pytest.raises(ConfigError, match="input_dim"):
            run_experiment(cfg)

    def test_num_clients_mismatch_rejected(self):
        cfg = tiny_config(partition=PartitionSpec(mode="iid", num_clients=3))
        with pytest.raises(ConfigError, match="num_clients"):
            run_experiment(cfg)


class TestReplicaSeeds:
    def test_first_replica_keeps_base(self):
        assert replica_seed(42, 0) == 42

    def test_replicas_distinct(self):
        seeds = {replica_seed(42, r) for r in range(5)}
        assert len(seeds) == 5
