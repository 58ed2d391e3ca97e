import numpy as np
import pytest
import torch

from fedbackdoor.models import (
    ClassifierSpec,
    GeneratorSpec,
    build_with_params,
    forward_classify,
    generate,
    init_params,
    module_schema,
    to_nchw,
)


@pytest.fixture(scope="module")
def small_spec():
    return ClassifierSpec(input_shape=(8, 8, 1), num_classes=10, conv_channels=(4, 8), feature_dim=16)


class TestForwardClassify:
    def test_rows_sum_to_one(self, small_spec):
        params = init_params(small_spec, seed=0)
        batch = np.random.default_rng(0).random((12, 8, 8, 1), dtype=np.float32)
        probs, feats = forward_classify(small_spec, params, batch)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)
        assert feats.shape == (12, 16)

    def test_constant_weights_give_uniform_softmax(self, small_spec):
        params = init_params(small_spec, seed=0)
        params.arrays = [np.full_like(a, 0.01) for a in params.arrays]
        batch = np.random.default_rng(1).random((6, 8, 8, 1), dtype=np.float32)
        probs, _ = forward_classify(small_spec, params, batch)
        assert np.allclose(probs, 1.0 / 10.0, atol=1e-4)

    def test_duplicated_sample_gives_identical_rows(self, small_spec):
        params = init_params(small_spec, seed=2)
        one = np.random.default_rng(2).random((1, 8, 8, 1), dtype=np.float32)
        batch = np.repeat(one, 5, axis=0)
        probs, feats = forward_classify(small_spec, params, batch)
        assert np.array_equal(probs, np.repeat(probs[:1], 5, axis=0))
        assert np.array_equal(feats, np.repeat(feats[:1], 5, axis=0))

    def test_shape_mismatch(self, small_spec):
        params = init_params(small_spec, seed=0)
        with pytest.raises(ValueError, match="does not match"):
            forward_classify(small_spec, params, np.zeros((2, 9, 9, 1), dtype=np.float32))


class TestGenerator:
    def test_deterministic_for_fixed_latent(self):
        spec = GeneratorSpec(output_shape=(8, 8, 1), latent_dim=6, base_channels=8, stages=2)
        params = init_params(spec, seed=1)
        z = np.zeros((3, 6), dtype=np.float32)
        a = generate(spec, params, z)
        b = generate(spec, params, z)
        assert np.array_equal(a, b)
        assert np.array_equal(a[0], a[1])

    def test_outputs_bounded(self):
        spec = GeneratorSpec(output_shape=(8, 8, 3), latent_dim=6, base_channels=8, stages=2)
        params = init_params(spec, seed=3)
        z = np.random.default_rng(0).standard_normal((16, 6)).astype(np.float32)
        out = generate(spec, params, z)
        assert out.shape == (16, 8, 8, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_distinct_latents_distinct_images(self):
        spec = GeneratorSpec(output_shape=(8, 8, 1), latent_dim=6, base_channels=8, stages=2)
        rng = np.random.default_rng(4)
        distances = []
        for seed in range(5):
            params = init_params(spec, seed=seed)
            z = rng.standard_normal((2, 6)).astype(np.float32)
            out = generate(spec, params, z)
            distances.append(float(np.linalg.norm(out[0] - out[1])))
        assert np.median(distances) > 0.0

    def test_odd_output_sizes_hit_exactly(self):
        spec = GeneratorSpec(output_shape=(28, 28, 1), latent_dim=4, base_channels=8, stages=3)
        params = init_params(spec, seed=0)
        out = generate(spec, params, np.zeros((1, 4), dtype=np.float32))
        assert out.shape == (1, 28, 28, 1)

    def test_latent_shape_error(self):
        spec = GeneratorSpec(output_shape=(8, 8, 1), latent_dim=6)
        params = init_params(spec, seed=0)
        with pytest.raises(ValueError, match="latents"):
            generate(spec, params, np.zeros((2, 7), dtype=np.float32))


class TestSchema:
    def test_schema_stable_across_inits(self, small_spec):
        assert init_params(small_spec, seed=0).schema == init_params(small_spec, seed=99).schema
        assert init_params(small_spec, seed=0).schema == module_schema(small_spec)

    def test_schema_distinguishes_architectures(self, small_spec):
        other = ClassifierSpec(
            input_shape=(8, 8, 1), num_classes=10, conv_channels=(4, 8), feature_dim=32
        )
        assert module_schema(other) != module_schema(small_spec)

    def test_parameter_count_stable(self, small_spec):
        assert init_params(small_spec, seed=0).num_values == init_params(small_spec, seed=1).num_values


def central_difference_grads(f, module, h=1e-5):
    """Finite-difference gradient of scalar f() w.r.t. every module parameter."""
    grads = []
    with torch.no_grad():
        for p in module.parameters():
            g = torch.zeros_like(p)
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = float(flat[j])
                flat[j] = orig + h
                hi = float(f())
                flat[j] = orig - h
                lo = float(f())
                flat[j] = orig
                g.view(-1)[j] = (hi - lo) / (2 * h)
            grads.append(g)
    return grads


class TestGradientCorrectness:
    """Autograd vs central differences on shrunken (<=1e3 param) variants."""

    def test_classifier_gradients(self):
        spec = ClassifierSpec(
            input_shape=(6, 6, 1), num_classes=3, conv_channels=(2,), feature_dim=4,
            activation="tanh",  # smooth, so finite differences are trustworthy
        )
        torch.manual_seed(0)
        model = spec.build().double()
        n_params = sum(p.numel() for p in model.parameters())
        assert n_params <= 1000, n_params
        x = torch.rand(4, 1, 6, 6, dtype=torch.float64)
        y = torch.tensor([0, 1, 2, 0])

        def f():
            return torch.nn.functional.cross_entropy(model(x), y)

        loss = f()
        analytic = torch.autograd.grad(loss, list(model.parameters()))
        numeric = central_difference_grads(f, model)
        for a, n in zip(analytic, numeric):
            denom = np.maximum(np.abs(a.numpy()), np.abs(n.numpy()))
            mask = denom > 1e-7
            rel = np.abs(a.numpy() - n.numpy())[mask] / denom[mask]
            assert rel.max() < 1e-3

    def test_generator_gradients_through_frozen_classifier(self):
        gspec = GeneratorSpec(
            output_shape=(6, 6, 1), latent_dim=3, base_channels=4, stages=1, activation="tanh"
        )
        cspec = ClassifierSpec(
            input_shape=(6, 6, 1), num_classes=3, conv_channels=(2,), feature_dim=4,
            activation="tanh",
        )
        torch.manual_seed(1)
        gen = gspec.build().double()
        clf = cspec.build().double()
        for p in clf.parameters():
            p.requires_grad_(False)
        assert sum(p.numel() for p in gen.parameters()) <= 1000
        z = torch.randn(4, 3, dtype=torch.float64)

        def f():
            logits = clf(gen(z))
            return torch.logsumexp(logits, dim=1).mean()

        loss = f()
        analytic = torch.autograd.grad(loss, list(gen.parameters()))
        numeric = central_difference_grads(f, gen)
        for a, n in zip(analytic, numeric):
            denom = np.maximum(np.abs(a.numpy()), np.abs(n.numpy()))
            mask = denom > 1e-7
            if not mask.any():
                continue
            rel = np.abs(a.numpy() - n.numpy())[mask] / denom[mask]
            assert rel.max() < 1e-3
