"""Round-based federated training: sampling, local updates, weighted averaging."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import data as data_mod
from .config import (
    ExperimentConfig,
    FedAvgConfig,
    FedDistillConfig,
    FedProxConfig,
    IdxDatasetConfig,
    LocalConfig,
)
from .data import ClientDataset, Dataset, PartitionConfig
from .distill import ClassGroups, CompositeLossConfig, classify_groups, composite_loss, cross_predict
from .metrics import EvalResult, RoundHistory, evaluate
from .nn import autograd as ag
from .nn import checkpoint
from .nn.functional import cross_entropy_graph
from .nn.model import BoundModel, ConfigError, ModelParams, ShapeError, small_cnn, small_mlp
from .nn.optim import SgdState, sgd_step

log = logging.getLogger(__name__)

# Stream tags keep the plan, client and init generators disjoint for one seed.
_INIT_STREAM, _PLAN_STREAM, _CLIENT_STREAM = 0, 1, 2


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class FedAvg:
    pass


@dataclass(frozen=True)
class FedProx:
    mu: float = 0.1

    def __post_init__(self):
        if self.mu < 0:
            raise ConfigError("FedProx mu must be >= 0")


@dataclass(frozen=True)
class FedDistill:
    composite: CompositeLossConfig = field(default_factory=CompositeLossConfig)


Strategy = Union[FedAvg, FedProx, FedDistill]


@dataclass(frozen=True)
class LocalHyper:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    epochs: int = 10
    batch_size: int = 64

    @classmethod
    def from_config(cls, cfg: LocalConfig) -> LocalHyper:
        return cls(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.epochs, cfg.batch_size)


@dataclass(eq=False)
class ClientState:
    client_id: int
    dataset: ClientDataset
    groups: ClassGroups
    experiment_seed: int = 0

    def rng(self, round_index: int) -> np.random.Generator:
        return np.random.default_rng([self.experiment_seed, _CLIENT_STREAM, round_index, self.client_id])


@dataclass(eq=False)
class RoundPlan:
    round_index: int
    selected: list[int]
    global_params: ModelParams

    def __post_init__(self):
        if len(set(self.selected)) != len(self.selected):
            raise ValueError("selected client ids must be distinct")


@dataclass(eq=False)
class LocalUpdate:
    client_id: int
    params: ModelParams
    weight: int


def make_clients(partition: list[ClientDataset], gamma: float, experiment_seed: int) -> list[ClientState]:
    clients = []
    for cd in partition:
        if len(cd):
            groups = classify_groups(cd.class_histogram, gamma)
        else:
            n = cd.parent.num_classes
            groups = ClassGroups(frozenset(), frozenset(range(n)), gamma, n)
        clients.append(ClientState(cd.client_id, cd, groups, experiment_seed))
    return clients


def sample_clients(n_total: int, ratio: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement of ceil(ratio * n_total) ids, returned sorted."""
    if not 0 < ratio <= 1:
        raise ValueError(f"sample ratio must lie in (0, 1], got {ratio}")
    # Guard against ratio * n landing a hair above an integer (0.07 * 100 = 7.000000000000001).
    k = min(n_total, max(1, math.ceil(round(ratio * n_total, 9))))
    if k == n_total:
        return list(range(n_total))
    return sorted(int(i) for i in rng.choice(n_total, size=k, replace=False))


def plan_round(experiment_seed: int, round_index: int, n_clients: int, ratio: float, global_params: ModelParams) -> RoundPlan:
    rng = np.random.default_rng([experiment_seed, _PLAN_STREAM, round_index])
    return RoundPlan(round_index, sample_clients(n_clients, ratio, rng), global_params)


def _prox_step(local: ModelParams, anchor: list[np.ndarray], lr: float, mu: float) -> None:
    """Exact proximal map of (mu/2)||theta - anchor||^2 with step ``lr``.

    Applied after each SGD step on the CE loss. Unlike a gradient step on the
    quadratic it stays stable for any ``lr * mu``.
    """
    c = lr * mu
    for a, g in zip(local.arrays(), anchor):
        a += c * g
        a /= 1.0 + c


def local_train(
    client: ClientState,
    global_params: ModelParams,
    strategy: Strategy,
    hyper: LocalHyper,
    rng: np.random.Generator | None = None,
) -> LocalUpdate:
    """Train a copy of the global model on one client's data.

    ``global_params`` is never mutated; it serves as the frozen teacher for
    FedDistill and the proximal anchor for FedProx.
    """
    local = global_params.copy()
    n = len(client.dataset)
    if n == 0:
        log.warning("client %d has no samples; skipped", client.client_id)
        return LocalUpdate(client.client_id, local, 0)
    if rng is None:
        rng = np.random.default_rng([client.experiment_seed, _CLIENT_STREAM, 0, client.client_id])

    parent = client.dataset.parent
    x_all = parent.inputs(client.dataset.indices, shape=global_params.input_shape).astype(global_params.dtype)
    y_all = parent.labels[client.dataset.indices]
    bound = BoundModel(local, trainable=True)
    params = bound.parameters()
    teacher = BoundModel(global_params, trainable=False) if isinstance(strategy, FedDistill) else None
    anchor = global_params.arrays() if isinstance(strategy, FedProx) else None
    state = SgdState(hyper.lr, hyper.momentum, hyper.weight_decay)

    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            x, y = x_all[idx], y_all[idx]
            if isinstance(strategy, FedDistill):
                preds = cross_predict(teacher.model, bound, x)
                loss = composite_loss(preds, y, client.groups, strategy.composite)
            else:
                _, logits = bound(x)
                loss = cross_entropy_graph(ag.softmax(logits), y)
            grads = ag.backward(loss, params)
            sgd_step(local, grads, state)
            if anchor is not None and strategy.mu:
                _prox_step(local, anchor, hyper.lr, strategy.mu)
    return LocalUpdate(client.client_id, local, n)


def aggregate(updates: list[LocalUpdate]) -> ModelParams:
    """Sample-count weighted mean of client parameters."""
    live = sorted((u for u in updates if u.weight > 0), key=lambda u: u.client_id)
    total = float(sum(u.weight for u in live))
    if not live or total <= 0:
        raise AggregationError("no update with positive weight to aggregate")
    ref = live[0].params
    for u in live[1:]:
        if [a.shape for a in u.params.arrays()] != [a.shape for a in ref.arrays()]:
            raise ShapeError(f"client {u.client_id} parameters do not match the global shapes")
    if len(live) == 1:
        return ref.copy()
    out = []
    for arrays in zip(*(u.params.arrays() for u in live)):
        acc = np.zeros_like(arrays[0])
        for u, a in zip(live, arrays):
            acc += (u.weight / total) * a
        out.append(acc)
    return ref.with_arrays(out)


@dataclass(eq=False)
class FederationState:
    clients: list[ClientState]
    test_set: Dataset
    hyper: LocalHyper
    global_params: ModelParams
    history: RoundHistory
    workers: int = 1


def run_round(state: FederationState, plan: RoundPlan, strategy: Strategy) -> tuple[ModelParams, EvalResult]:
    """Train the selected clients, average them, evaluate and record the round."""
    by_id = {c.client_id: c for c in state.clients}

    def train(cid: int) -> LocalUpdate:
        client = by_id[cid]
        return local_train(client, plan.global_params, strategy, state.hyper, client.rng(plan.round_index))

    if state.workers > 1 and len(plan.selected) > 1:
        with ThreadPoolExecutor(max_workers=state.workers) as pool:
            updates = list(pool.map(train, plan.selected))
    else:
        updates = [train(cid) for cid in plan.selected]

    new_global = aggregate(updates)
    result = evaluate(new_global, state.test_set)
    state.history.append(plan.round_index, result)
    state.global_params = new_global
    return new_global, result


# -- experiment assembly ---------------------------------------------------------


def build_strategy(cfg) -> Strategy:
    if isinstance(cfg, FedAvgConfig):
        return FedAvg()
    if isinstance(cfg, FedProxConfig):
        return FedProx(cfg.mu)
    if isinstance(cfg, FedDistillConfig):
        return FedDistill(cfg.composite())
    raise ConfigError(f"unknown strategy config {cfg!r}")


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if isinstance(ds, IdxDatasetConfig):
        train = data_mod.load_idx(ds.train_images, ds.train_labels, ds.num_classes)
        test = data_mod.load_idx(ds.test_images, ds.test_labels, ds.num_classes or train.num_classes)
        num_classes = max(train.num_classes, test.num_classes)
        train.num_classes = test.num_classes = num_classes
        if ds.train_subset:
            train = data_mod.random_subset(train, ds.train_subset, ds.subset_seed)
        if ds.test_subset:
            test = data_mod.random_subset(test, ds.test_subset, ds.subset_seed + 1)
        return train, test
    full = data_mod.synth_dataset(
        ds.n_classes, ds.n_train_per_class + ds.n_test_per_class, ds.feature_dim, ds.separation, ds.seed, ds.noise
    )
    return data_mod.stratified_split(full, ds.n_test_per_class, ds.seed + 1)


def build_model(cfg: ExperimentConfig, train: Dataset, seed: int) -> ModelParams:
    m = cfg.model
    dtype = np.float32 if m.dtype == "float32" else np.float64
    init_seed = np.random.SeedSequence([seed, _INIT_STREAM])
    if m.name == "SmallCNN":
        shape = tuple(train.sample_shape)
        if len(shape) != 3:
            side = int(round(train.feature_dim**0.5))
            if side * side != train.feature_dim:
                raise ConfigError(f"SmallCNN needs image-shaped data, got feature_dim {train.feature_dim}")
            shape = (1, side, side)
        return small_cnn(train.num_classes, shape, m.hidden, init_seed, m.classifier_bias, dtype)
    return small_mlp(train.num_classes, train.feature_dim, m.hidden, init_seed, m.classifier_bias, None, dtype)


@dataclass
class ExperimentResult:
    seed: int
    history: RoundHistory
    final_params: ModelParams
    initial_params: ModelParams
    checkpoints: dict[int, ModelParams] = field(default_factory=dict)


def run_experiment(
    cfg: ExperimentConfig,
    seed: int,
    output_dir=None,
    workers: int = 1,
    data: tuple[Dataset, Dataset] | None = None,
    keep_checkpoints: bool = False,
) -> ExperimentResult:
    """Run ``cfg.federation.rounds`` rounds for one seed.

    Client sampling, partitioning and initialization depend only on ``seed``
    and the data/federation settings, never on the strategy, so runs that
    differ only in strategy see identical round plans.
    """
    train, test = data if data is not None else load_datasets(cfg)
    fed = cfg.federation
    partition = data_mod.dirichlet_partition(
        train,
        PartitionConfig(fed.n_clients, cfg.partition.alpha, seed, cfg.partition.min_samples_per_client, cfg.partition.max_retries),
    )
    gamma = cfg.strategy.resolve_gamma(train.num_classes) if isinstance(cfg.strategy, FedDistillConfig) else 1.0 / train.num_classes
    clients = make_clients(partition, gamma, seed)
    model = build_model(cfg, train, seed)
    strategy = build_strategy(cfg.strategy)
    history = RoundHistory(train.num_classes)
    state = FederationState(clients, test, LocalHyper.from_config(fed.local), model, history, workers)
    result = ExperimentResult(seed, history, model, model.copy())

    out = Path(output_dir) if output_dir is not None else None
    for t in range(1, fed.rounds + 1):
        plan = plan_round(seed, t, fed.n_clients, fed.sample_ratio, state.global_params)
        _, ev = run_round(state, plan, strategy)
        log.info("seed %d round %d/%d top1 %.4f", seed, t, fed.rounds, ev.top1)
        if fed.checkpoint_every and t % fed.checkpoint_every == 0:
            if keep_checkpoints:
                result.checkpoints[t] = state.global_params
            if out is not None:
                checkpoint.save(state.global_params, out / "checkpoints" / f"round_{t:04d}.fdck")
    result.final_params = state.global_params
    if out is not None:
        checkpoint.save(result.final_params, out / "final.fdck")
    return result
