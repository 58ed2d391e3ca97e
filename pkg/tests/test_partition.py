import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedbackdoor.data import LabeledDataset
from fedbackdoor.errors import PartitioningError
from fedbackdoor.partition import (
    heterogeneity_index,
    load_partition_manifest,
    partition_label_skew,
    partition_manifest,
    save_partition_manifest,
)


def make_dataset(class_counts, image_size=4, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(class_counts)])
    samples = rng.random((len(labels), image_size, image_size, 1), dtype=np.float32)
    return LabeledDataset(samples, labels, num_classes=len(class_counts), name="toy")


class TestHeterogeneityIndex:
    def test_single_class_clients(self):
        assert heterogeneity_index(1, 10) == 1.0

    def test_full_coverage(self):
        assert heterogeneity_index(10, 10) == 0.0

    def test_half_coverage(self):
        # independent arithmetic: 1 - (5-1)/(10-1) = 5/9
        assert heterogeneity_index(5, 10) == pytest.approx(5.0 / 9.0, abs=1e-12)
        assert round(heterogeneity_index(5, 10), 4) == 0.5556

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            heterogeneity_index(0, 10)
        with pytest.raises(ValueError):
            heterogeneity_index(11, 10)
        with pytest.raises(ValueError):
            heterogeneity_index(1, 1)

    def test_strictly_decreasing_in_n_c(self):
        for n in (2, 5, 10, 23):
            values = [heterogeneity_index(k, n) for k in range(1, n + 1)]
            assert all(a > b for a, b in zip(values, values[1:]))


class TestPartitionLabelSkew:
    def test_iid_limit_all_classes(self):
        ds = make_dataset([30] * 10)
        parts, scheme = partition_label_skew(ds, num_clients=10, n_c=10, seed=0)
        assert scheme.heterogeneity == 0.0
        for p in parts:
            assert p.class_set == frozenset(range(10))

    def test_extreme_skew_single_class(self):
        ds = make_dataset([30] * 10)
        parts, scheme = partition_label_skew(ds, num_clients=10, n_c=1, seed=0)
        assert scheme.heterogeneity == 1.0
        for p in parts:
            assert p.n_c == 1
            assert set(np.unique(ds.labels[p.indices])) == set(p.class_set)

    def test_exhaustive_set_checks(self):
        ds = make_dataset([50] * 10)
        parts, _ = partition_label_skew(ds, num_clients=100, n_c=4, seed=7)
        assert len(parts) == 100
        seen = set()
        for p in parts:
            assert p.n_c == 4
            idx = set(int(i) for i in p.indices)
            assert not (idx & seen), "partitions must be pairwise disjoint"
            seen |= idx
            assert set(np.unique(ds.labels[p.indices]).tolist()) == set(p.class_set)
        assert seen == set(range(len(ds)))

    def test_deterministic_under_seed(self):
        ds = make_dataset([40] * 10)
        a, _ = partition_label_skew(ds, 12, 3, seed=5)
        b, _ = partition_label_skew(ds, 12, 3, seed=5)
        c, _ = partition_label_skew(ds, 12, 3, seed=6)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.indices, pb.indices)
            assert pa.class_set == pb.class_set
        assert any(
            not np.array_equal(pa.indices, pc.indices) for pa, pc in zip(a, c)
        ), "different seeds should shuffle the assignment"

    def test_insufficient_samples_names_class(self):
        ds = make_dataset([40, 40, 2, 40])
        with pytest.raises(PartitioningError, match="class 2"):
            partition_label_skew(ds, num_clients=8, n_c=2, seed=0)

    def test_too_few_shards_to_cover_classes(self):
        ds = make_dataset([10] * 10)
        with pytest.raises(PartitioningError, match="cover"):
            partition_label_skew(ds, num_clients=4, n_c=2, seed=0)

    def test_n_c_out_of_range(self):
        ds = make_dataset([10] * 4)
        with pytest.raises(PartitioningError):
            partition_label_skew(ds, 4, 5, seed=0)

    @settings(max_examples=25, deadline=None)
    @given(
        num_clients=st.integers(2, 12),
        n_c=st.integers(1, 6),
        num_classes=st.integers(2, 6),
        seed=st.integers(0, 10_000),
    )
    def test_invariants_hold_for_random_configurations(self, num_clients, n_c, num_classes, seed):
        n_c = min(n_c, num_classes)
        ds = make_dataset([num_clients * n_c] * num_classes, image_size=2)
        if num_clients * n_c < num_classes:
            with pytest.raises(PartitioningError):
                partition_label_skew(ds, num_clients, n_c, seed)
            return
        parts, _ = partition_label_skew(ds, num_clients, n_c, seed)
        all_idx = np.concatenate([p.indices for p in parts])
        assert len(all_idx) == len(set(all_idx.tolist())) == len(ds)
        for p in parts:
            assert p.n_c == n_c
            assert set(np.unique(ds.labels[p.indices]).tolist()) == set(p.class_set)


class TestManifest:
    def test_roundtrip(self, tmp_path):
        ds = make_dataset([20] * 5)
        parts, scheme = partition_label_skew(ds, 5, 2, seed=1)
        path = tmp_path / "partitions.json"
        save_partition_manifest(path, parts, scheme)
        loaded_parts, loaded_scheme = load_partition_manifest(path)
        assert loaded_scheme == scheme
        for a, b in zip(parts, loaded_parts):
            assert a.client_id == b.client_id
            assert np.array_equal(a.indices, b.indices)
            assert a.class_set == b.class_set

    def test_manifest_indices_sorted(self):
        ds = make_dataset([20] * 5)
        parts, scheme = partition_label_skew(ds, 5, 2, seed=1)
        payload = partition_manifest(parts, scheme)
        for entry in payload["clients"].values():
            assert entry["indices"] == sorted(entry["indices"])
