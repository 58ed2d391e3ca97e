"""Stage-I attack: train a generator against the live global model.

The attacker has no discriminator of its own, so the received global
classifier plays that role. The generator loss combines authenticity
terms (one-hot confidence, feature significance) with diversity terms
(batch-entropy over classes, a mode-seeking ratio between latent pairs):

    total = L_oh + L_fs + alpha * (L_ie + L_ms)

All four terms are minimized; the mode-seeking term is stored as the
negative of the diversity ratio so that the single sum above is the
training objective (a larger ratio means more diverse samples, hence a
more negative term).

Each attack round runs ``gan_iters`` generator SGD steps against the
frozen global model, caches low-loss samples into a supplementary cache,
then performs the pre-poisoning pass: local SGD where every batch is
extended with freshly generated samples labeled as the backdoor target.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import LabeledDataset
from .errors import GeneratorDivergenceError
from .models import (
    ClassifierSpec,
    GeneratorSpec,
    build_with_params,
    forward_classify,
    module_schema,
    params_from_module,
    to_nchw,
    to_nhwc,
)
from .params import ModelParams, params_sub
from .partition import DataPartition
from .runtime import FLConfig, RoundUpdate, iterate_batches, partition_weight
from .seeding import derive_seed, rng_for

EPS = 1e-8


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def one_hot_loss(probs) -> torch.Tensor:
    """Mean cross-entropy of each softmax row against its own argmax one-hot.

    Equals -log of the row maximum, so it is zero exactly on one-hot rows
    and rewards confident predictions of any class.
    """
    p = _as_tensor(probs)
    return -torch.log(p.max(dim=1).values.clamp_min(EPS)).mean()


def feature_significance_loss(features) -> torch.Tensor:
    """Mean of -log(||f||_2 / dim(f)) over the batch's feature-tap rows."""
    f = _as_tensor(features)
    norms = f.norm(dim=1)
    if bool((norms == 0).any()):
        warnings.warn("zero-norm feature row clamped in feature_significance_loss")
    return -torch.log(norms.clamp_min(EPS) / f.shape[1]).mean()


def information_entropy_loss(probs) -> torch.Tensor:
    """Negative entropy of the batch-mean softmax vector.

    Minimized (at -ln N) when generated samples spread evenly over all
    classes; zero-probability entries contribute zero.
    """
    p = _as_tensor(probs).mean(dim=0)
    return torch.special.xlogy(p, p).sum()


def mode_seeking_term(probs_a, probs_b, latents_a, latents_b) -> torch.Tensor:
    """Negated diversity ratio between paired latent draws.

    For pairs (z1, z2) the ratio ||D(G(z1)) - D(G(z2))|| / ||z1 - z2||
    grows with sample diversity; returning its negative mean makes mode
    collapse (identical outputs) the worst case at 0.
    """
    da, db = _as_tensor(probs_a), _as_tensor(probs_b)
    za, zb = _as_tensor(latents_a), _as_tensor(latents_b)
    num = (da - db).norm(dim=1)
    den = (za - zb).norm(dim=1).clamp_min(EPS)
    return -(num / den).mean()


@dataclass
class GeneratorLossReport:
    one_hot: float
    feature_significance: float
    information_entropy: float
    mode_seeking: float
    alpha: float
    total: float


def generator_loss(
    classifier: torch.nn.Module,
    generator: torch.nn.Module,
    latents: torch.Tensor,
    alpha: float = 1.0,
) -> tuple[torch.Tensor, GeneratorLossReport]:
    """Full generator objective on one latent batch; differentiable in the
    generator's parameters. The latent batch is split in half to form the
    mode-seeking pairs (odd trailing sample ignored there)."""
    loss, report, _ = generator_loss_with_images(classifier, generator, latents, alpha)
    return loss, report


def generator_loss_with_images(
    classifier: torch.nn.Module,
    generator: torch.nn.Module,
    latents: torch.Tensor,
    alpha: float = 1.0,
) -> tuple[torch.Tensor, GeneratorLossReport, torch.Tensor]:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    images = generator(latents)
    logits, feats = classifier.forward_with_features(images)
    probs = torch.softmax(logits, dim=1)

    l_oh = one_hot_loss(probs)
    l_fs = feature_significance_loss(feats)
    l_ie = information_entropy_loss(probs)
    half = len(latents) // 2
    if half >= 1:
        l_ms = mode_seeking_term(
            probs[:half], probs[half : 2 * half], latents[:half], latents[half : 2 * half]
        )
    else:
        l_ms = torch.zeros((), dtype=probs.dtype)
    total = l_oh + l_fs + alpha * (l_ie + l_ms)
    report = GeneratorLossReport(
        one_hot=float(l_oh.detach()),
        feature_significance=float(l_fs.detach()),
        information_entropy=float(l_ie.detach()),
        mode_seeking=float(l_ms.detach()),
        alpha=float(alpha),
        total=float(total.detach()),
    )
    return total, report, images


# ---------------------------------------------------------------------------
# supplementary cache and dataset
# ---------------------------------------------------------------------------


@dataclass
class SupplementaryDataset:
    """Generated samples with model-assigned labels and provenance."""

    samples: np.ndarray  # (n, H, W, C)
    assigned_labels: np.ndarray  # (n,) int64
    confidences: np.ndarray  # (n,) float32, softmax max at labeling time
    cached_loss: np.ndarray  # (n,) float32, generator loss at caching time
    source_round: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.assigned_labels)

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def class_coverage(self) -> int:
        return len(np.unique(self.assigned_labels))

    def save(self, directory: str | Path) -> None:
        """Array archive + JSON manifest, for reproducibility audits."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            directory / "supplementary.npz",
            samples=self.samples,
            assigned_labels=self.assigned_labels,
            confidences=self.confidences,
            cached_loss=self.cached_loss,
            source_round=self.source_round,
        )
        manifest = {
            "count": int(len(self)),
            "label_counts": {
                str(c): int(n)
                for c, n in zip(*np.unique(self.assigned_labels, return_counts=True))
            },
            "confidence_mean": float(self.confidences.mean()) if len(self) else None,
            "rounds": sorted(int(r) for r in np.unique(self.source_round)),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory: str | Path) -> "SupplementaryDataset":
        with np.load(Path(directory) / "supplementary.npz") as z:
            return cls(
                samples=z["samples"],
                assigned_labels=z["assigned_labels"],
                confidences=z["confidences"],
                cached_loss=z["cached_loss"],
                source_round=z["source_round"],
            )


@dataclass
class InferenceConfig:
    """Stage-I attacker knobs."""

    gan_iters: int = 100  # generator SGD iterations per attack round
    gan_batch: int = 64
    gen_lr: float = 0.01
    gen_lr_decay: float = 0.9
    gen_decay_every: int = 50  # in cumulative generator iterations
    alpha: float = 1.0
    caching_threshold: float | None = None  # None -> per-round 25th percentile
    cache_percentile: float = 25.0
    max_cache_per_round: int = 256
    poison_fraction: float = 0.25  # injected share of each local batch
    pre_poison: bool = True
    target_class: int = 0
    reset_each_round: bool = False

    def __post_init__(self):
        if not 0 < self.poison_fraction < 1:
            raise ValueError("poison_fraction must be in (0, 1)")
        if min(self.gan_iters, self.gan_batch) < 1 or self.gen_lr <= 0:
            raise ValueError("generator settings must be positive")


@dataclass
class GeneratorState:
    """Attacker-owned generator that persists across attack rounds."""

    spec: GeneratorSpec
    params: ModelParams
    lr: float
    iterations: int = 0
    cache_samples: list[np.ndarray] = field(default_factory=list)
    cache_losses: list[np.ndarray] = field(default_factory=list)
    cache_rounds: list[np.ndarray] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)

    @classmethod
    def fresh(cls, spec: GeneratorSpec, config: InferenceConfig, seed: int = 0) -> "GeneratorState":
        torch.manual_seed(derive_seed(seed, "generator-init"))
        module = spec.build()
        return cls(spec=spec, params=params_from_module(module, module_schema(spec)), lr=config.gen_lr)

    def cache_size(self) -> int:
        return int(sum(len(s) for s in self.cache_samples))

    def cached_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.cache_samples:
            h, w, c = self.spec.output_shape
            return (
                np.zeros((0, h, w, c), dtype=np.float32),
                np.zeros(0, dtype=np.float32),
                np.zeros(0, dtype=np.int64),
            )
        return (
            np.concatenate(self.cache_samples),
            np.concatenate(self.cache_losses),
            np.concatenate(self.cache_rounds),
        )


def _generation_pass(
    classifier: torch.nn.Module,
    generator: torch.nn.Module,
    config: InferenceConfig,
    state: GeneratorState,
    round_idx: int,
    seed: int,
) -> tuple[list[np.ndarray], list[float], np.ndarray]:
    """Run the per-round generator iterations against the frozen classifier.

    Returns (per-iteration sample batches, per-iteration losses, final fresh
    batch for pre-poisoning). Raises on non-finite loss.
    """
    rng = rng_for(seed, "latents", round_idx)
    optimizer = torch.optim.SGD(generator.parameters(), lr=state.lr)
    batches: list[np.ndarray] = []
    losses: list[float] = []
    for it in range(config.gan_iters):
        z = torch.from_numpy(
            rng.standard_normal((config.gan_batch, state.spec.latent_dim)).astype(np.float32)
        )
        optimizer.zero_grad()
        loss, _, images = generator_loss_with_images(classifier, generator, z, alpha=config.alpha)
        if not torch.isfinite(loss):
            raise GeneratorDivergenceError(
                f"non-finite generator loss at iteration {it}", round_idx=round_idx
            )
        batches.append(to_nhwc(images))
        losses.append(float(loss.detach()))
        loss.backward()
        optimizer.step()
        state.iterations += 1
        if state.iterations % config.gen_decay_every == 0:
            state.lr *= config.gen_lr_decay
            for group in optimizer.param_groups:
                group["lr"] = state.lr
    with torch.no_grad():
        z = torch.from_numpy(
            rng.standard_normal((config.gan_batch, state.spec.latent_dim)).astype(np.float32)
        )
        fresh = to_nhwc(generator(z))
    return batches, losses, fresh


def run_inference_round(
    spec: ClassifierSpec,
    global_params: ModelParams,
    dataset: LabeledDataset,
    partition: DataPartition,
    state: GeneratorState,
    config: InferenceConfig,
    fl_config: FLConfig,
    round_idx: int,
    lr: float | None = None,
    seed: int = 0,
) -> tuple[RoundUpdate, int]:
    """One stage-I attack round: generation, caching, pre-poisoning.

    The global model acts as a frozen discriminator for ``gan_iters``
    generator steps; batches whose loss clears the caching gate join the
    supplementary cache. Local training then runs E epochs of SGD where
    each batch is extended with generated samples labeled as the target
    class (skipped when pre-poisoning is disabled). On generator
    divergence the round is retried once at half learning rate from the
    round-start generator state before giving up.

    Returns the (unamplified) update and the number of newly cached samples.
    """
    classifier = build_with_params(spec, global_params)
    classifier.eval()
    for p in classifier.parameters():
        p.requires_grad_(False)

    if config.reset_each_round:
        fresh_state = GeneratorState.fresh(state.spec, config, seed=derive_seed(seed, round_idx))
        state.params, state.lr, state.iterations = fresh_state.params, fresh_state.lr, 0

    generator = build_with_params(state.spec, state.params)
    snapshot = state.params.copy()
    snapshot_iters = state.iterations
    try:
        batches, losses, fresh = _generation_pass(
            classifier, generator, config, state, round_idx, seed
        )
    except GeneratorDivergenceError:
        generator = build_with_params(state.spec, snapshot)
        state.iterations = snapshot_iters
        state.lr /= 2.0
        batches, losses, fresh = _generation_pass(
            classifier, generator, config, state, round_idx, seed
        )
    state.params = params_from_module(generator, state.params.schema)
    state.loss_history.extend(losses)

    # Caching gate: fixed threshold if configured, else this round's percentile.
    loss_arr = np.asarray(losses)
    threshold = (
        config.caching_threshold
        if config.caching_threshold is not None
        else float(np.percentile(loss_arr, config.cache_percentile))
    )
    new_cached = 0
    order = np.argsort(loss_arr, kind="stable")
    for it in order:
        if loss_arr[it] >= threshold or new_cached >= config.max_cache_per_round:
            break
        batch = batches[it]
        take = min(len(batch), config.max_cache_per_round - new_cached)
        state.cache_samples.append(batch[:take])
        state.cache_losses.append(np.full(take, loss_arr[it], dtype=np.float32))
        state.cache_rounds.append(np.full(take, round_idx, dtype=np.int64))
        new_cached += take

    # Pre-poisoning pass: honest-looking local SGD, every batch extended
    # with generated samples mislabeled as the target class.
    lr = fl_config.lr_at(round_idx) if lr is None else lr
    model = build_with_params(spec, global_params)
    model.train()
    optimizer = torch.optim.SGD(model.parameters(), lr=lr)
    x_all = dataset.samples[partition.indices]
    y_all = dataset.labels[partition.indices]
    rng = rng_for(seed, "pre-poison", round_idx)
    n_inject = int(np.ceil(config.poison_fraction * fl_config.batch_size))
    epoch_losses = []
    for epoch in range(fl_config.local_epochs):
        epoch_loss = []
        for batch_idx in iterate_batches(len(x_all), fl_config.batch_size, rng):
            xb = x_all[batch_idx]
            yb = y_all[batch_idx]
            if config.pre_poison:
                pick = rng.choice(len(fresh), size=min(n_inject, len(fresh)), replace=False)
                xb = np.concatenate([xb, fresh[pick]])
                yb = np.concatenate(
                    [yb, np.full(len(pick), config.target_class, dtype=np.int64)]
                )
            optimizer.zero_grad()
            loss = torch.nn.functional.cross_entropy(
                model(to_nchw(xb)), torch.from_numpy(yb)
            )
            loss.backward()
            optimizer.step()
            epoch_loss.append(float(loss.detach()))
        epoch_losses.append(float(np.mean(epoch_loss)))

    local = params_from_module(model, global_params.schema)
    update = RoundUpdate(
        client_id=partition.client_id,
        delta=params_sub(local, global_params),
        weight=partition_weight(partition, dataset),
        round_idx=round_idx,
        epoch_losses=epoch_losses,
    )
    return update, new_cached


def label_supplementary(
    samples: np.ndarray,
    spec: ClassifierSpec,
    params: ModelParams,
    confidence_floor: float = 0.0,
    cached_loss: np.ndarray | None = None,
    source_round: np.ndarray | None = None,
) -> SupplementaryDataset:
    """Assign labels to cached samples by global-model argmax.

    Samples whose top softmax probability falls below ``confidence_floor``
    are dropped; an empty survivor set yields the explicit empty dataset.
    """
    if cached_loss is None:
        cached_loss = np.zeros(len(samples), dtype=np.float32)
    if source_round is None:
        source_round = np.zeros(len(samples), dtype=np.int64)
    if len(samples) == 0:
        return SupplementaryDataset(
            samples=samples.reshape((0,) + tuple(spec.input_shape)),
            assigned_labels=np.zeros(0, dtype=np.int64),
            confidences=np.zeros(0, dtype=np.float32),
            cached_loss=np.zeros(0, dtype=np.float32),
            source_round=np.zeros(0, dtype=np.int64),
        )
    probs, _ = forward_classify(spec, params, samples)
    labels = probs.argmax(axis=1).astype(np.int64)
    confidences = probs.max(axis=1).astype(np.float32)
    keep = confidences >= confidence_floor
    return SupplementaryDataset(
        samples=samples[keep],
        assigned_labels=labels[keep],
        confidences=confidences[keep],
        cached_loss=np.asarray(cached_loss)[keep].astype(np.float32),
        source_round=np.asarray(source_round)[keep].astype(np.int64),
    )


def save_sample_grid(path: str | Path, samples: np.ndarray, cols: int = 8) -> None:
    """Tile generated samples into one PNG for qualitative inspection."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(samples)
    if n == 0:
        raise ValueError("no samples to render")
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 1.2, rows * 1.2))
    for i, ax in enumerate(np.atleast_1d(axes).ravel()):
        ax.axis("off")
        if i < n:
            img = samples[i]
            ax.imshow(img.squeeze(-1) if img.shape[-1] == 1 else img, cmap="gray", vmin=0, vmax=1)
    fig.tight_layout(pad=0.2)
    fig.savefig(path, dpi=100)
    plt.close(fig)
