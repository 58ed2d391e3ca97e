"""Label-skew shard partitioning and the heterogeneity index.

Clients receive ``n_c`` class-pure shards from ``n_c`` distinct classes.
Skew is summarized by the heterogeneity index
``1 - (n_c - 1) / (N - 1)``: 0 when every client sees all classes, 1 when
each client is single-class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .errors import PartitioningError
from .seeding import rng_for


def heterogeneity_index(n_c: int, num_classes: int) -> float:
    """Skew level in [0, 1] induced by giving each client n_c classes."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if not 1 <= n_c <= num_classes:
        raise ValueError(f"n_c must be in [1, {num_classes}], got {n_c}")
    return 1.0 - (n_c - 1) / (num_classes - 1)


@dataclass(frozen=True)
class DataPartition:
    """One client's slice of the training set."""

    client_id: int
    indices: np.ndarray  # sorted int64 sample indices
    class_set: frozenset[int]

    @property
    def n_c(self) -> int:
        return len(self.class_set)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class PartitionScheme:
    num_clients: int
    n_c: int
    seed: int
    heterogeneity: float


def partition_label_skew(
    dataset: LabeledDataset, num_clients: int, n_c: int, seed: int = 0
) -> tuple[list[DataPartition], PartitionScheme]:
    """Split a dataset into K clients holding n_c class-pure shards each.

    Shards are contiguous runs of each class's sorted indices (remainder
    samples join the class's last shard) assigned randomly but such that
    every client ends up with exactly n_c distinct classes and every class
    is covered. Deterministic under (dataset, K, n_c, seed).
    """
    n_classes = dataset.num_classes
    if not 1 <= n_c <= n_classes:
        raise PartitioningError(f"n_c must be in [1, {n_classes}], got {n_c}")
    if num_clients < 1:
        raise PartitioningError(f"need at least one client, got {num_clients}")
    total_shards = num_clients * n_c
    if total_shards < n_classes:
        raise PartitioningError(
            f"{num_clients} clients x {n_c} classes gives {total_shards} shards, "
            f"too few to cover {n_classes} classes"
        )

    rng = rng_for(seed, "partition", num_clients, n_c)

    # Per-class shard counts: as balanced as possible, remainder spread randomly.
    shards_per_class = np.full(n_classes, total_shards // n_classes, dtype=np.int64)
    remainder = total_shards - shards_per_class.sum()
    if remainder:
        extra = rng.choice(n_classes, size=remainder, replace=False)
        shards_per_class[extra] += 1

    class_counts = dataset.class_counts()
    for cls in range(n_classes):
        if class_counts[cls] < shards_per_class[cls]:
            raise PartitioningError(
                f"class {cls} has {class_counts[cls]} samples but needs "
                f"{shards_per_class[cls]} shards"
            )

    # Assign n_c distinct classes per client. Always taking from the classes
    # with the most unassigned shards keeps the remaining counts feasible.
    remaining = shards_per_class.copy()
    client_classes: list[np.ndarray] = []
    for _ in range(num_clients):
        order = rng.permutation(n_classes)  # random tie-breaking
        order = order[np.argsort(-remaining[order], kind="stable")]
        picked = order[:n_c]
        remaining[picked] -= 1
        client_classes.append(np.sort(picked))
    assert not remaining.any()

    # Cut each class into contiguous shards over its sorted indices and deal
    # them to the subscribing clients in random order.
    client_indices: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for cls in range(n_classes):
        subscribers = [i for i, classes in enumerate(client_classes) if cls in classes]
        rng.shuffle(subscribers)
        idx = np.sort(dataset.class_indices(cls))
        m = len(subscribers)
        base = len(idx) // m
        bounds = [k * base for k in range(m)] + [len(idx)]  # remainder -> last shard
        for k, client in enumerate(subscribers):
            client_indices[client].append(idx[bounds[k] : bounds[k + 1]])

    partitions = [
        DataPartition(
            client_id=i,
            indices=np.sort(np.concatenate(chunks)),
            class_set=frozenset(int(c) for c in client_classes[i]),
        )
        for i, chunks in enumerate(client_indices)
    ]
    scheme = PartitionScheme(
        num_clients=num_clients,
        n_c=n_c,
        seed=seed,
        heterogeneity=heterogeneity_index(n_c, n_classes),
    )
    return partitions, scheme


def partition_manifest(partitions: list[DataPartition], scheme: PartitionScheme) -> dict:
    """JSON-serializable audit record of a partitioning."""
    return {
        "scheme": {
            "num_clients": scheme.num_clients,
            "n_c": scheme.n_c,
            "seed": scheme.seed,
            "heterogeneity": scheme.heterogeneity,
        },
        "clients": {
            str(p.client_id): {
                "indices": [int(i) for i in p.indices],
                "class_set": sorted(p.class_set),
            }
            for p in partitions
        },
    }


def save_partition_manifest(
    path: str | Path, partitions: list[DataPartition], scheme: PartitionScheme
) -> None:
    Path(path).write_text(json.dumps(partition_manifest(partitions, scheme), indent=1))


def load_partition_manifest(path: str | Path) -> tuple[list[DataPartition], PartitionScheme]:
    payload = json.loads(Path(path).read_text())
    s = payload["scheme"]
    scheme = PartitionScheme(s["num_clients"], s["n_c"], s["seed"], s["heterogeneity"])
    partitions = [
        DataPartition(
            client_id=int(cid),
            indices=np.asarray(entry["indices"], dtype=np.int64),
            class_set=frozenset(entry["class_set"]),
        )
        for cid, entry in sorted(payload["clients"].items(), key=lambda kv: int(kv[0]))
    ]
    return partitions, scheme
