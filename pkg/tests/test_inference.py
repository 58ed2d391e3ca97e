import numpy as np
import pytest

from fedbackdoor.data import LabeledDataset
from fedbackdoor.errors import GeneratorDivergenceError
from fedbackdoor.generation import (
    GeneratorState,
    InferenceConfig,
    SupplementaryDataset,
    label_supplementary,
    run_inference_round,
    save_sample_grid,
)
from fedbackdoor.models import ClassifierSpec, GeneratorSpec, init_params
from fedbackdoor.partition import partition_label_skew
from fedbackdoor.runtime import FLConfig


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(4), 16)
    samples = rng.random((64, 8, 8, 1), dtype=np.float32) * 0.2
    for c in range(4):
        samples[labels == c, 2 * c : 2 * c + 2, :, :] += 0.7
    ds = LabeledDataset(np.clip(samples, 0, 1), labels, 4, "toy")
    spec = ClassifierSpec(input_shape=(8, 8, 1), num_classes=4, conv_channels=(4,), feature_dim=8)
    gspec = GeneratorSpec(output_shape=(8, 8, 1), latent_dim=6, base_channels=8, stages=2)
    parts, _ = partition_label_skew(ds, num_clients=2, n_c=4, seed=0)
    fl_cfg = FLConfig(
        num_clients=2, clients_per_round=2, rounds=1, local_epochs=1, batch_size=16, lr=0.05, seed=0
    )
    return ds, spec, gspec, parts, fl_cfg


def inference_config(**kw):
    defaults = dict(gan_iters=6, gan_batch=8, gen_lr=0.05, target_class=0)
    defaults.update(kw)
    return InferenceConfig(**defaults)


class TestRunInferenceRound:
    def test_closed_caching_gate_still_produces_update(self, setup):
        ds, spec, gspec, parts, fl_cfg = setup
        params = init_params(spec, seed=1)
        cfg = inference_config(caching_threshold=-np.inf)
        state = GeneratorState.fresh(gspec, cfg, seed=0)
        update, cached = run_inference_round(
            spec, params, ds, parts[0], state, cfg, fl_cfg, round_idx=0
        )
        assert cached == 0 and state.cache_size() == 0
        assert any(np.abs(a).sum() > 0 for a in update.delta.arrays)

    def test_zero_epochs_zero_delta_generation_still_runs(self, setup):
        ds, spec, gspec, parts, _ = setup
        fl_cfg = FLConfig(
            num_clients=2, clients_per_round=2, rounds=1, local_epochs=0,
            batch_size=16, lr=0.05, seed=0,
        )
        params = init_params(spec, seed=1)
        cfg = inference_config()
        state = GeneratorState.fresh(gspec, cfg, seed=0)
        before = state.params.copy()
        update, _ = run_inference_round(
            spec, params, ds, parts[0], state, cfg, fl_cfg, round_idx=0
        )
        assert all(np.array_equal(a, np.zeros_like(a)) for a in update.delta.arrays)
        assert not state.params.allclose(before), "generator must still train"
        assert state.iterations == cfg.gan_iters

    def test_global_params_never_mutated(self, setup):
        ds, spec, gspec, parts, fl_cfg = setup
        params = init_params(spec, seed=2)
        before = [a.copy() for a in params.arrays]
        cfg = inference_config()
        state = GeneratorState.fresh(gspec, cfg, seed=0)
        run_inference_round(spec, params, ds, parts[0], state, cfg, fl_cfg, round_idx=0)
        assert all(np.array_equal(a, b) for a, b in zip(params.arrays, before))

    def test_cache_grows_monotonically(self, setup):
        ds, spec, gspec, parts, fl_cfg = setup
        params = init_params(spec, seed=3)
        cfg = inference_config()  # adaptive percentile gate
        state = GeneratorState.fresh(gspec, cfg, seed=0)
        sizes = []
        for r in range(3):
            run_inference_round(spec, params, ds, parts[0], state, cfg, fl_cfg, round_idx=r)
            sizes.append(state.cache_size())
        assert sizes == sorted(sizes)
        assert sizes[-1] > 0  # percentile gate caches every round
        _, losses, rounds = state.cached_arrays()
        assert len(losses) == sizes[-1]
        assert set(np.unique(rounds)) <= {0, 1, 2}

    def test_divergence_retries_then_aborts(self, setup):
        ds, spec, gspec, parts, fl_cfg = setup
        params = init_params(spec, seed=4)
        params.arrays[0][:] = 1e32  # classifier overflows -> non-finite loss
        cfg = inference_config()
        state = GeneratorState.fresh(gspec, cfg, seed=0)
        lr_before = state.lr
        with pytest.raises(GeneratorDivergenceError):
            run_inference_round(spec, params, ds, parts[0], state, cfg, fl_cfg, round_idx=0)
        assert state.lr == pytest.approx(lr_before / 2)

    def test_pre_poison_flag_changes_update(self, setup):
        ds, spec, gspec, parts, fl_cfg = setup
        params = init_params(spec, seed=5)
        updates = {}
        for flag in (True, False):
            cfg = inference_config(pre_poison=flag)
            state = GeneratorState.fresh(gspec, cfg, seed=0)
            updates[flag], _ = run_inference_round(
                spec, params, ds, parts[0], state, cfg, fl_cfg, round_idx=0, seed=7
            )
        assert not updates[True].delta.allclose(updates[False].delta)


class TestLabelSupplementary:
    def make_samples(self, spec, n=12):
        rng = np.random.default_rng(1)
        return rng.random((n,) + spec.input_shape, dtype=np.float32)

    def test_floor_zero_keeps_all(self, setup):
        _, spec, *_ = setup
        params = init_params(spec, seed=0)
        samples = self.make_samples(spec)
        sup = label_supplementary(samples, spec, params, confidence_floor=0.0)
        assert len(sup) == len(samples)
        assert sup.assigned_labels.min() >= 0 and sup.assigned_labels.max() < 4

    def test_impossible_floor_gives_empty_marker(self, setup):
        _, spec, *_ = setup
        params = init_params(spec, seed=0)
        sup = label_supplementary(self.make_samples(spec), spec, params, confidence_floor=1.01)
        assert sup.is_empty and len(sup) == 0

    def test_floor_filters_by_confidence(self, setup):
        _, spec, *_ = setup
        params = init_params(spec, seed=0)
        all_kept = label_supplementary(self.make_samples(spec), spec, params, 0.0)
        floor = float(np.median(all_kept.confidences))
        filtered = label_supplementary(self.make_samples(spec), spec, params, floor)
        assert len(filtered) < len(all_kept)
        assert (filtered.confidences >= floor).all()

    def test_labels_match_model_argmax(self, setup):
        _, spec, *_ = setup
        from fedbackdoor.models import forward_classify

        params = init_params(spec, seed=6)
        samples = self.make_samples(spec)
        sup = label_supplementary(samples, spec, params, confidence_floor=0.0)
        probs, _ = forward_classify(spec, params, samples)
        assert np.array_equal(sup.assigned_labels, probs.argmax(axis=1))


class TestSupplementaryDataset:
    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        sup = SupplementaryDataset(
            samples=rng.random((5, 8, 8, 1), dtype=np.float32),
            assigned_labels=np.array([0, 1, 2, 1, 0]),
            confidences=np.array([0.9, 0.8, 0.7, 0.95, 0.85], dtype=np.float32),
            cached_loss=np.zeros(5, dtype=np.float32),
            source_round=np.array([0, 0, 1, 1, 2]),
        )
        sup.save(tmp_path / "sup")
        loaded = SupplementaryDataset.load(tmp_path / "sup")
        assert np.array_equal(loaded.samples, sup.samples)
        assert np.array_equal(loaded.assigned_labels, sup.assigned_labels)
        assert (tmp_path / "sup" / "manifest.json").exists()
        assert sup.class_coverage() == 3

    def test_sample_grid_renders(self, tmp_path):
        rng = np.random.default_rng(0)
        save_sample_grid(tmp_path / "grid.png", rng.random((7, 8, 8, 1)))
        assert (tmp_path / "grid.png").stat().st_size > 0
