"""Simulated cross-silo FedAvg: local SGD, weighted aggregation, rounds.

Each round the server broadcasts the global parameters to a uniformly
selected client subset, clients run E epochs of mini-batch SGD and return
``delta = w_local - w_global``, and the server applies the weighted sum of
deltas (weights renormalized over the round's participants). Malicious
clients plug in through the same behavior interface as honest ones.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Iterator, Protocol

import numpy as np
import torch

from .data import LabeledDataset
from .errors import DivergenceError
from .models import (
    ClassifierSpec,
    build_with_params,
    init_params,
    module_schema,
    params_from_module,
    predict_labels,
    to_nchw,
)
from .params import ModelParams, params_add, params_sub, save_params, weighted_sum
from .partition import DataPartition
from .seeding import derive_seed, rng_for


@dataclass(frozen=True)
class FLConfig:
    num_clients: int
    clients_per_round: int
    rounds: int
    local_epochs: int = 2
    batch_size: int = 32
    lr: float = 0.01
    lr_decay: float = 0.95
    decay_every: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.clients_per_round > self.num_clients:
            raise ValueError("clients_per_round cannot exceed num_clients")
        if min(self.lr, self.lr_decay) <= 0 or self.batch_size < 1:
            raise ValueError("rates and batch size must be positive")

    def lr_at(self, round_idx: int) -> float:
        """Server-side schedule: decay applied every `decay_every` rounds."""
        return self.lr * self.lr_decay ** (round_idx // self.decay_every)


@dataclass
class RoundUpdate:
    client_id: int
    delta: ModelParams
    weight: float  # client's share of the training set, in (0, 1]
    round_idx: int
    epoch_losses: list[float] = field(default_factory=list)


@dataclass
class ClientContext:
    """Everything a client behavior sees in one round."""

    spec: ClassifierSpec
    global_params: ModelParams
    dataset: LabeledDataset
    partition: DataPartition
    config: FLConfig
    round_idx: int
    lr: float
    seed: int


Behavior = Callable[[ClientContext], RoundUpdate]
LossFn = Callable[[torch.nn.Module, torch.Tensor, torch.Tensor], torch.Tensor]


def iterate_batches(
    n: int, batch_size: int, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    """Shuffled index batches covering 0..n-1; final partial batch kept."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def default_loss(model: torch.nn.Module, xb: torch.Tensor, yb: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.cross_entropy(model(xb), yb)


def partition_weight(partition: DataPartition, dataset: LabeledDataset) -> float:
    return len(partition) / len(dataset)


def local_train(
    spec: ClassifierSpec,
    global_params: ModelParams,
    dataset: LabeledDataset,
    partition: DataPartition,
    config: FLConfig,
    round_idx: int = 0,
    lr: float | None = None,
    seed: int = 0,
    loss_fn: LossFn | None = None,
) -> RoundUpdate:
    """E epochs of mini-batch SGD on the client's partition.

    Returns delta = w_local - w_global; the caller's global params are
    never touched. Raises :class:`DivergenceError` on a non-finite loss.
    """
    if len(partition) == 0:
        raise ValueError(f"client {partition.client_id} has an empty partition")
    if not global_params.all_finite():
        raise ValueError("global params contain non-finite values")
    lr = config.lr_at(round_idx) if lr is None else lr
    loss_fn = loss_fn or default_loss

    model = build_with_params(spec, global_params)
    model.train()
    optimizer = torch.optim.SGD(model.parameters(), lr=lr)
    x_all = dataset.samples[partition.indices]
    y_all = dataset.labels[partition.indices]
    rng = rng_for(seed, "batches", round_idx, partition.client_id)

    epoch_losses = []
    for epoch in range(config.local_epochs):
        losses = []
        for batch_idx in iterate_batches(len(x_all), config.batch_size, rng):
            xb = to_nchw(x_all[batch_idx])
            yb = torch.from_numpy(y_all[batch_idx])
            optimizer.zero_grad()
            loss = loss_fn(model, xb, yb)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss for client {partition.client_id}",
                    round_idx=round_idx,
                    epoch=epoch,
                )
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        epoch_losses.append(float(np.mean(losses)))

    local = params_from_module(model, global_params.schema)
    return RoundUpdate(
        client_id=partition.client_id,
        delta=params_sub(local, global_params),
        weight=partition_weight(partition, dataset),
        round_idx=round_idx,
        epoch_losses=epoch_losses,
    )


def combine_updates(updates: list[RoundUpdate]) -> ModelParams:
    """Participant-weighted mean of deltas (weights renormalized to sum 1)."""
    if not updates:
        raise ValueError("no updates to combine")
    total = sum(u.weight for u in updates)
    if total <= 0:
        raise ValueError("update weights must be positive")
    return weighted_sum([(u.weight / total, u.delta) for u in updates])


def aggregate(global_params: ModelParams, updates: list[RoundUpdate]) -> ModelParams:
    """FedAvg step: new global = old global + renormalized weighted deltas."""
    return params_add(global_params, combine_updates(updates))


def select_clients(
    config: FLConfig,
    round_idx: int,
    malicious_ids: frozenset[int] = frozenset(),
    guarantee_attacker: bool = False,
) -> list[int]:
    """Uniform selection without replacement, optionally forcing one attacker in."""
    rng = rng_for(config.seed, "select", round_idx)
    selected = list(rng.choice(config.num_clients, size=config.clients_per_round, replace=False))
    if guarantee_attacker and malicious_ids and not (set(selected) & malicious_ids):
        victim = rng.integers(0, len(selected))
        selected[victim] = int(rng.choice(sorted(malicious_ids)))
    return [int(c) for c in selected]


@dataclass
class RoundRecord:
    round_idx: int
    selected: list[int]
    lr: float
    mean_loss: float
    test_accuracy: float | None
    wall_seconds: float


@dataclass
class RunResult:
    params: ModelParams
    records: list[RoundRecord]


def honest_behavior(ctx: ClientContext) -> RoundUpdate:
    return local_train(
        ctx.spec,
        ctx.global_params,
        ctx.dataset,
        ctx.partition,
        ctx.config,
        round_idx=ctx.round_idx,
        lr=ctx.lr,
        seed=ctx.seed,
    )


def save_checkpoint(
    directory: Path,
    round_idx: int,
    params: ModelParams,
    record: RoundRecord | None,
    spec: ClassifierSpec,
) -> None:
    out = directory / f"round_{round_idx}"
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema": params.schema,
        "round": round_idx,
        "arch": {
            "input_shape": list(spec.input_shape),
            "num_classes": spec.num_classes,
            "conv_channels": list(spec.conv_channels),
            "feature_dim": spec.feature_dim,
            "activation": spec.activation,
        },
        "metrics": asdict(record) if record else None,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    save_params(out / "params.bin", params)


def run_rounds(
    spec: ClassifierSpec,
    config: FLConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    partitions: list[DataPartition],
    behaviors: dict[int, Behavior] | None = None,
    malicious_ids: frozenset[int] | set[int] = frozenset(),
    guarantee_attacker: bool = False,
    initial_params: ModelParams | None = None,
    eval_every: int = 1,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    log_path: str | Path | None = None,
) -> RunResult:
    """Drive the federated simulation for ``config.rounds`` rounds.

    ``behaviors`` maps client ids to behaviors; unmapped clients train
    honestly. A behavior raising :class:`DivergenceError` aborts the run
    after persisting the current global state (when checkpointing is on).
    """
    if len(partitions) != config.num_clients:
        raise ValueError("partitions must cover exactly num_clients clients")
    behaviors = behaviors or {}
    malicious_ids = frozenset(malicious_ids)
    by_id = {p.client_id: p for p in partitions}
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None

    global_params = (
        initial_params.copy()
        if initial_params is not None
        else init_params(spec, seed=derive_seed(config.seed, "init"))
    )
    records: list[RoundRecord] = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for round_idx in range(config.rounds):
            start = time.perf_counter()
            lr = config.lr_at(round_idx)
            selected = select_clients(config, round_idx, malicious_ids, guarantee_attacker)
            updates = []
            for client_id in selected:
                ctx = ClientContext(
                    spec=spec,
                    global_params=global_params,
                    dataset=train,
                    partition=by_id[client_id],
                    config=config,
                    round_idx=round_idx,
                    lr=lr,
                    seed=derive_seed(config.seed, "client", round_idx, client_id),
                )
                behavior = behaviors.get(client_id, honest_behavior)
                try:
                    updates.append(behavior(ctx))
                except DivergenceError:
                    if checkpoint_dir is not None:
                        save_checkpoint(checkpoint_dir, round_idx, global_params, None, spec)
                    raise
            global_params = aggregate(global_params, updates)

            acc = None
            if eval_every and (round_idx % eval_every == 0 or round_idx == config.rounds - 1):
                acc = float(
                    np.mean(predict_labels(spec, global_params, test.samples) == test.labels)
                )
            record = RoundRecord(
                round_idx=round_idx,
                selected=selected,
                lr=lr,
                mean_loss=float(
                    np.mean([np.mean(u.epoch_losses) for u in updates if u.epoch_losses])
                )
                if any(u.epoch_losses for u in updates)
                else float("nan"),
                test_accuracy=acc,
                wall_seconds=time.perf_counter() - start,
            )
            records.append(record)
            if log_file:
                payload = asdict(record)
                payload["mean_loss"] = None if np.isnan(record.mean_loss) else record.mean_loss
                log_file.write(json.dumps(payload) + "\n")
                log_file.flush()
            if checkpoint_dir is not None and checkpoint_every and (
                (round_idx + 1) % checkpoint_every == 0 or round_idx == config.rounds - 1
            ):
                save_checkpoint(checkpoint_dir, round_idx, global_params, record, spec)
    finally:
        if log_file:
            log_file.close()
    return RunResult(params=global_params, records=records)
