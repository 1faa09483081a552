"""Round loop: broadcast, parallel local training, aggregation, centralized
evaluation, and per-round metric capture.

Learning metrics (accuracy, loss) are a pure function of the experiment
configuration; timing metrics are measured wall time and exempt from the
determinism contract.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adversary import AdversarySpec, corrupt
from .data import Dataset, SyntheticSpec, load_dataset
from .errors import ConfigError, ExperimentAborted, NumericError
from .model import (
    LocalOptimizerConfig,
    ModelSpec,
    forward_logits,
    forward_loss_grad,
    init_model,
    init_opt_state,
    local_step,
)
from .partition import PartitionSpec, partition
from .strategies import ClientUpdate, Strategy, StrategyConfig, StrategyState

Array = np.ndarray

# Stable stream tags for deriving independent per-purpose seeds from the
# master seed. Python's hash() is salted, so seeds go through SeedSequence.
_TAG_TRAIN = 1
_TAG_ADVERSARY = 2
_TAG_DP = 3
_TAG_SUBSET = 4
_TAG_PARTITION = 5
_TAG_MODEL_INIT = 6
_TAG_REPLICA = 7


def derived_rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def derived_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


def replica_seed(base_seed: int, replicate: int) -> int:
    """Master seed for replicate r of a run (replicate 0 keeps the base)."""
    if replicate == 0:
        return base_seed
    return derived_seed(base_seed, _TAG_REPLICA, replicate)


@dataclass
class TimingRecord:
    train_seconds: float = 0.0
    serialize_seconds: float = 0.0
    deserialize_seconds: float = 0.0


@dataclass
class RoundMetrics:
    round: int
    centralized_accuracy: float
    centralized_loss: float
    agg_time_s: float
    train_time_s: float
    comm_time_s: float
    clip_norm: float | None = None


@dataclass
class ClientShard:
    """One client's slice of the training data."""

    client_id: int
    features: Array
    labels: Array

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class ExperimentConfig:
    dataset: str = "synthmnist"
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    model: ModelSpec = field(default_factory=lambda: ModelSpec(0, [128], 0))
    local: LocalOptimizerConfig = field(default_factory=LocalOptimizerConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    rounds: int = 25
    num_clients: int = 10
    master_seed: int = 42
    train_subset: int | None = None
    eval_subset: int | None = None
    adversary: AdversarySpec = field(default_factory=AdversarySpec)
    synthetic: SyntheticSpec | None = None
    data_dir: str | None = None

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError(f"experiment.rounds must be >= 1, got {self.rounds}")
        if self.num_clients < 1:
            raise ConfigError(
                f"experiment.num_clients must be >= 1, got {self.num_clients}"
            )
        if self.master_seed < 0:
            raise ConfigError(f"experiment.master_seed must be >= 0, got {self.master_seed}")
        for name in ("train_subset", "eval_subset"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"experiment.{name} must be >= 1, got {value}")
        if self.partition.num_clients != self.num_clients:
            raise ConfigError(
                f"partition.num_clients ({self.partition.num_clients}) disagrees "
                f"with experiment.num_clients ({self.num_clients})"
            )
        self.partition.validate()
        self.local.validate()
        self.strategy.validate()
        self.adversary.validate(self.num_clients)
        if self.synthetic is not None:
            self.synthetic.validate()
        # Model dims may still be the fill-from-dataset sentinel 0.
        if self.model.input_dim < 0 or self.model.output_classes < 0:
            raise ConfigError("model dimensions must be >= 0")


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    final_params: Array
    strategy_state: StrategyState
    train_size: int
    eval_size: int


def train_local(
    params: Array,
    spec: ModelSpec,
    features: Array,
    labels: Array,
    cfg: LocalOptimizerConfig,
    rng: np.random.Generator,
    prox_mu: float = 0.0,
    prox_center: Array | None = None,
) -> Array:
    """Run local_epochs of minibatch training and return the new parameters.

    Optimizer state is fresh per call (clients restart from the broadcast
    global weights each round). Partial trailing batches are kept. With
    prox_mu > 0 the gradient gains the proximal pull mu * (w - w_global).
    """
    params = params.copy()
    state = init_opt_state(cfg, params.shape[0])
    n = features.shape[0]
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            _, grad = forward_loss_grad(params, spec, features[batch], labels[batch])
            if prox_mu > 0.0:
                grad = grad + prox_mu * (params - prox_center)
            params, state = local_step(params, grad, state, cfg)
    return params


def evaluate_centralized(
    params: Array, spec: ModelSpec, features: Array, labels: Array, chunk: int = 1024
) -> tuple[float, float]:
    """Accuracy (argmax-correct fraction) and mean cross-entropy on a test set."""
    if features.shape[0] == 0:
        raise ConfigError("evaluation set is empty")
    correct = 0
    loss_sum = 0.0
    for start in range(0, features.shape[0], chunk):
        x = features[start : start + chunk]
        y = labels[start : start + chunk]
        logits = forward_logits(params, spec, x)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss_sum += float(-log_probs[np.arange(len(y)), y].sum())
        correct += int((logits.argmax(axis=1) == y).sum())
    n = features.shape[0]
    return correct / n, loss_sum / n


def _client_round(
    global_params: Array,
    shard: ClientShard,
    spec: ModelSpec,
    cfg: LocalOptimizerConfig,
    rng: np.random.Generator,
    prox_mu: float,
    round_idx: int,
) -> ClientUpdate:
    """Simulated downlink, local training, and uplink for one client."""
    timing = TimingRecord()

    t0 = time.perf_counter()
    payload = global_params.tobytes()
    t1 = time.perf_counter()
    local_params = np.frombuffer(payload, dtype=np.float64).copy()
    t2 = time.perf_counter()
    timing.serialize_seconds += t1 - t0
    timing.deserialize_seconds += t2 - t1

    t0 = time.perf_counter()
    try:
        trained = train_local(
            local_params,
            spec,
            shard.features,
            shard.labels,
            cfg,
            rng,
            prox_mu=prox_mu,
            prox_center=global_params,
        )
    except NumericError as err:
        raise NumericError(
            f"client {shard.client_id} failed in round {round_idx}: {err}"
        ) from err
    timing.train_seconds = time.perf_counter() - t0

    t0 = time.perf_counter()
    reply = trained.tobytes()
    t1 = time.perf_counter()
    received = np.frombuffer(reply, dtype=np.float64).copy()
    t2 = time.perf_counter()
    timing.serialize_seconds += t1 - t0
    timing.deserialize_seconds += t2 - t1

    return ClientUpdate(
        client_id=shard.client_id,
        new_params=received,
        num_samples=len(shard),
        timing=timing,
    )


def run_round(
    global_params: Array,
    clients: list[ClientShard],
    strategy: Strategy,
    round_idx: int,
    *,
    model: ModelSpec,
    local: LocalOptimizerConfig,
    master_seed: int,
    eval_features: Array,
    eval_labels: Array,
    adversary: AdversarySpec | None = None,
    pool: ThreadPoolExecutor | None = None,
) -> tuple[Array, RoundMetrics]:
    """Execute one communication round and measure the paper-style metrics."""
    if not clients:
        raise ConfigError("round needs at least one client")

    prox_mu = strategy.client_prox_mu

    def job(shard: ClientShard) -> ClientUpdate:
        rng = derived_rng(master_seed, round_idx, shard.client_id, _TAG_TRAIN)
        return _client_round(global_params, shard, model, local, rng, prox_mu, round_idx)

    train_start = time.perf_counter()
    if pool is None:
        updates = [job(shard) for shard in clients]
    else:
        # Futures are collected in client-id order so learning metrics stay
        # deterministic regardless of scheduling.
        updates = [f.result() for f in [pool.submit(job, s) for s in clients]]
    train_time = time.perf_counter() - train_start

    for u in updates:
        if not np.all(np.isfinite(u.new_params)):
            raise NumericError(
                f"client {u.client_id} produced non-finite parameters in round {round_idx}"
            )

    if adversary is not None and adversary.kind != "none":
        updates = [
            corrupt(
                u,
                adversary,
                global_params,
                derived_rng(master_seed, round_idx, u.client_id, _TAG_ADVERSARY),
            )
            for u in updates
        ]

    agg_start = time.perf_counter()
    new_params = strategy.aggregate(
        global_params,
        updates,
        rng=derived_rng(master_seed, round_idx, _TAG_DP),
    )
    agg_time = time.perf_counter() - agg_start

    if not np.all(np.isfinite(new_params)):
        raise NumericError(f"aggregation produced non-finite parameters in round {round_idx}")

    acc, loss = evaluate_centralized(new_params, model, eval_features, eval_labels)
    comm_time = sum(
        u.timing.serialize_seconds + u.timing.deserialize_seconds
        for u in updates
        if u.timing is not None
    )
    metrics = RoundMetrics(
        round=round_idx,
        centralized_accuracy=acc,
        centralized_loss=loss,
        agg_time_s=agg_time,
        train_time_s=train_time,
        comm_time_s=comm_time,
        clip_norm=strategy.state.clip_norm if strategy.kind == "dp" else None,
    )
    return new_params, metrics


def _subset(features: Array, labels: Array, count: int | None, rng: np.random.Generator):
    if count is None or count >= features.shape[0]:
        return features, labels
    keep = rng.permutation(features.shape[0])[:count]
    return features[keep], labels[keep]


def build_shards(train: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    part = partition(train, spec)
    return [
        ClientShard(
            client_id=k,
            features=train.features[idx],
            labels=train.labels[idx],
        )
        for k, idx in enumerate(part.assignments)
    ]


def run_experiment(cfg: ExperimentConfig, max_workers: int | None = None) -> ExperimentResult:
    """Run the full round loop for one configuration.

    Configuration problems surface before round 1. A numeric failure mid-run
    raises ExperimentAborted carrying the metrics collected so far.
    """
    cfg.validate()
    train, test = load_dataset(cfg.dataset, cfg.data_dir, cfg.synthetic)

    model = cfg.model
    if model.input_dim == 0:
        model.input_dim = train.features.shape[1]
    if model.output_classes == 0:
        model.output_classes = train.num_classes
    if model.input_dim != train.features.shape[1]:
        raise ConfigError(
            f"model.input_dim {model.input_dim} does not match dataset "
            f"feature width {train.features.shape[1]}"
        )
    if model.init_seed is None:
        model.init_seed = derived_seed(cfg.master_seed, _TAG_MODEL_INIT)
    model.validate()

    train_x, train_y = _subset(
        train.features, train.labels, cfg.train_subset,
        derived_rng(cfg.master_seed, _TAG_SUBSET, 0),
    )
    eval_x, eval_y = _subset(
        test.features, test.labels, cfg.eval_subset,
        derived_rng(cfg.master_seed, _TAG_SUBSET, 1),
    )

    pspec = cfg.partition
    if pspec.seed is None:
        pspec.seed = derived_seed(cfg.master_seed, _TAG_PARTITION)
    shards = build_shards(
        Dataset(train_x, train_y, train.name, train.num_classes), pspec
    )

    global_params = init_model(model)
    strategy = Strategy(cfg.strategy)

    metrics: list[RoundMetrics] = []
    workers = max_workers if max_workers is not None else min(cfg.num_clients, 8)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for round_idx in range(1, cfg.rounds + 1):
            try:
                global_params, record = run_round(
                    global_params,
                    shards,
                    strategy,
                    round_idx,
                    model=model,
                    local=cfg.local,
                    master_seed=cfg.master_seed,
                    eval_features=eval_x,
                    eval_labels=eval_y,
                    adversary=cfg.adversary,
                    pool=pool,
                )
            except NumericError as err:
                raise ExperimentAborted(str(err), metrics, err) from err
            metrics.append(record)

    return ExperimentResult(
        config=cfg,
        metrics=metrics,
        final_params=global_params,
        strategy_state=strategy.state,
        train_size=train_x.shape[0],
        eval_size=eval_x.shape[0],
    )
