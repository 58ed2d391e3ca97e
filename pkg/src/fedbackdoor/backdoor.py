"""Stage-II attack: triggers, source-specified backdoor training, amplification.

The source-specified loss has three parts: stamped specified-class samples
pulled toward the target label, stamped non-specified samples held to
their own labels (weight beta1), and the plain clean-data loss (beta2).
The regular all-source backdoor is the special case with every non-target
class specified, beta1 = 0, and unit clean weight. Target-class samples
are never stamped or relabeled during training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import LabeledDataset
from .errors import CompositionError, DivergenceError
from .generation import SupplementaryDataset
from .models import ClassifierSpec, build_with_params, params_from_module, to_nchw
from .params import ModelParams, params_sub
from .partition import DataPartition
from .runtime import FLConfig, RoundUpdate, iterate_batches, partition_weight
from .seeding import rng_for

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TriggerSpec:
    """Pixel-block trigger: pattern, size, and placement."""

    height: int
    width: int
    row: int
    col: int
    seed: int = 0

    @classmethod
    def corner(cls, image_shape: tuple[int, int, int], size: int = 4, seed: int = 0) -> "TriggerSpec":
        """Size x size block flush with the bottom-right corner."""
        h, w, _ = image_shape
        return cls(height=size, width=size, row=h - size, col=w - size, seed=seed)

    def pattern(self, channels: int) -> np.ndarray:
        """Deterministic uniform-random pixel block in [0, 1]."""
        rng = rng_for(self.seed, "trigger", self.height, self.width, channels)
        return rng.uniform(0.0, 1.0, size=(self.height, self.width, channels)).astype(np.float32)

    def save_image(self, path: str | Path, channels: int = 1) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        pat = self.pattern(channels)
        fig, ax = plt.subplots(figsize=(2, 2))
        ax.imshow(pat.squeeze(-1) if channels == 1 else pat, cmap="gray", vmin=0, vmax=1)
        ax.axis("off")
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)


def apply_trigger(images: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Stamp the trigger pattern onto copies of the images (by replacement).

    Accepts (H, W, C) or (n, H, W, C); pixels outside the trigger window
    are untouched and the input array is never modified.
    """
    single = images.ndim == 3
    batch = images[None] if single else images
    n, h, w, c = batch.shape
    if trigger.row < 0 or trigger.col < 0 or trigger.row + trigger.height > h or trigger.col + trigger.width > w:
        raise ValueError(
            f"trigger window {trigger.height}x{trigger.width} at "
            f"({trigger.row}, {trigger.col}) exceeds image bounds {h}x{w}"
        )
    out = batch.copy()
    out[:, trigger.row : trigger.row + trigger.height, trigger.col : trigger.col + trigger.width, :] = trigger.pattern(c)
    return out[0] if single else out


@dataclass(frozen=True)
class AttackPlan:
    """Attacker configuration for backdoor training."""

    target_class: int
    specified_classes: frozenset[int]
    beta1: float = 0.1
    beta2: float = 0.1
    amplification: float = 3.0
    poisoning_rate: float = 0.5
    use_supplementary: bool = True

    def __post_init__(self):
        if self.target_class in self.specified_classes:
            raise ValueError("the target class cannot also be a specified source class")
        if not 0 < self.poisoning_rate <= 1:
            raise ValueError("poisoning_rate must be in (0, 1]")
        if self.amplification < 1:
            raise ValueError("amplification must be >= 1")

    @property
    def n_s(self) -> int:
        return len(self.specified_classes)

    @classmethod
    def all_source(
        cls,
        target_class: int,
        num_classes: int,
        amplification: float = 3.0,
        poisoning_rate: float = 0.5,
        use_supplementary: bool = False,
    ) -> "AttackPlan":
        """Regular-backdoor plan: every non-target class specified, no
        robustness term, unit clean weight."""
        return cls(
            target_class=target_class,
            specified_classes=frozenset(range(num_classes)) - {target_class},
            beta1=0.0,
            beta2=1.0,
            amplification=amplification,
            poisoning_rate=poisoning_rate,
            use_supplementary=use_supplementary,
        )

    def to_dict(self) -> dict:
        return {
            "target_class": self.target_class,
            "specified_classes": sorted(self.specified_classes),
            "beta1": self.beta1,
            "beta2": self.beta2,
            "amplification": self.amplification,
            "poisoning_rate": self.poisoning_rate,
            "use_supplementary": self.use_supplementary,
        }


def stamp_counts(batch_size: int, poisoning_rate: float) -> int:
    return int(np.ceil(poisoning_rate * batch_size))


def ssbl_loss(
    model: torch.nn.Module,
    images: np.ndarray,
    labels: np.ndarray,
    plan: AttackPlan,
    trigger: TriggerSpec,
    stamp_mask: np.ndarray | None = None,
    strict: bool = False,
) -> tuple[torch.Tensor, tuple[float, float, float]]:
    """Source-specified backdoor loss on one clean batch.

    ``stamp_mask`` selects which members may receive the trigger (all by
    default); target-class members are always excluded. Stamped specified
    members are scored against the target label, stamped non-specified
    members against their own labels, and the whole clean batch feeds the
    ordinary loss term. Empty terms contribute zero. Returns the combined
    loss plus the three raw term values.
    """
    labels = np.asarray(labels)
    if stamp_mask is None:
        stamp_mask = np.ones(len(labels), dtype=bool)
    eligible = stamp_mask & (labels != plan.target_class)
    spec_members = np.isin(labels, sorted(plan.specified_classes))
    s_idx = np.flatnonzero(eligible & spec_members)
    ns_idx = np.flatnonzero(eligible & ~spec_members)

    if strict and len(s_idx) == 0:
        raise CompositionError("batch has no specified-class members to stamp")

    device_dtype = next(model.parameters()).dtype
    zero = torch.zeros((), dtype=device_dtype)

    clean_logits = model(to_nchw(images).to(device_dtype))
    term_clean = torch.nn.functional.cross_entropy(clean_logits, torch.from_numpy(labels))

    term_spec = zero
    if len(s_idx):
        stamped = apply_trigger(images[s_idx], trigger)
        targets = torch.full((len(s_idx),), plan.target_class, dtype=torch.long)
        term_spec = torch.nn.functional.cross_entropy(
            model(to_nchw(stamped).to(device_dtype)), targets
        )

    term_ns = zero
    if len(ns_idx):
        stamped = apply_trigger(images[ns_idx], trigger)
        term_ns = torch.nn.functional.cross_entropy(
            model(to_nchw(stamped).to(device_dtype)), torch.from_numpy(labels[ns_idx])
        )

    total = term_spec + plan.beta1 * term_ns + plan.beta2 * term_clean
    return total, (
        float(term_spec.detach()),
        float(term_ns.detach()),
        float(term_clean.detach()),
    )


def amplify(update: RoundUpdate, factor: float) -> RoundUpdate:
    """Scale the update's delta element-wise; weight and metadata unchanged."""
    if factor < 1:
        raise ValueError("amplification factor must be >= 1")
    return RoundUpdate(
        client_id=update.client_id,
        delta=update.delta.scaled(factor),
        weight=update.weight,
        round_idx=update.round_idx,
        epoch_losses=list(update.epoch_losses),
    )


def _compose_batch(
    x_local: np.ndarray,
    y_local: np.ndarray,
    batch_idx: np.ndarray,
    supplementary: SupplementaryDataset | None,
    sup_share: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Mix a local index batch with supplementary draws at the given share."""
    xb = x_local[batch_idx]
    yb = y_local[batch_idx]
    if supplementary is None or supplementary.is_empty or sup_share <= 0:
        return xb, yb
    n_sup = int(round(sup_share * len(batch_idx)))
    if n_sup == 0:
        return xb, yb
    pick = rng.choice(len(supplementary), size=n_sup, replace=len(supplementary) < n_sup)
    return (
        np.concatenate([xb, supplementary.samples[pick]]),
        np.concatenate([yb, supplementary.assigned_labels[pick]]),
    )


def stage2_local_train(
    spec: ClassifierSpec,
    global_params: ModelParams,
    dataset: LabeledDataset,
    partition: DataPartition,
    supplementary: SupplementaryDataset | None,
    plan: AttackPlan,
    trigger: TriggerSpec,
    fl_config: FLConfig,
    round_idx: int = 0,
    lr: float | None = None,
    seed: int = 0,
    max_supplementary_share: float = 0.5,
) -> RoundUpdate:
    """Backdoor-train for E epochs and return the unamplified update.

    Batches mix local and supplementary samples proportionally to the two
    pool sizes (supplementary capped at ``max_supplementary_share`` of a
    batch); within each batch, ceil(poisoning_rate * batch) members are
    picked for stamping. Target-class samples are never stamped.
    """
    if len(partition) == 0:
        raise ValueError(f"client {partition.client_id} has an empty partition")
    lr = fl_config.lr_at(round_idx) if lr is None else lr

    sup = supplementary if plan.use_supplementary else None
    x_local = dataset.samples[partition.indices]
    y_local = dataset.labels[partition.indices]
    sup_share = 0.0
    if sup is not None and not sup.is_empty:
        sup_share = min(len(sup) / (len(sup) + len(x_local)), max_supplementary_share)

    local_specified = np.isin(y_local, sorted(plan.specified_classes)).any()
    sup_specified = (
        sup is not None
        and not sup.is_empty
        and np.isin(sup.assigned_labels, sorted(plan.specified_classes)).any()
    )
    if not local_specified and not sup_specified:
        log.warning(
            "client %d: no specified-class samples available; the targeting "
            "loss term will be empty this round",
            partition.client_id,
        )

    model = build_with_params(spec, global_params)
    model.train()
    optimizer = torch.optim.SGD(model.parameters(), lr=lr)
    rng = rng_for(seed, "stage2", round_idx)

    epoch_losses = []
    for epoch in range(fl_config.local_epochs):
        losses = []
        for batch_idx in iterate_batches(len(x_local), fl_config.batch_size, rng):
            xb, yb = _compose_batch(x_local, y_local, batch_idx, sup, sup_share, rng)
            n_stamp = min(stamp_counts(len(yb), plan.poisoning_rate), len(yb))
            mask = np.zeros(len(yb), dtype=bool)
            mask[rng.choice(len(yb), size=n_stamp, replace=False)] = True
            optimizer.zero_grad()
            loss, _ = ssbl_loss(model, xb, yb, plan, trigger, stamp_mask=mask)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite backdoor loss for client {partition.client_id}",
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


def regular_backdoor_train(
    spec: ClassifierSpec,
    global_params: ModelParams,
    dataset: LabeledDataset,
    partition: DataPartition,
    target_class: int,
    trigger: TriggerSpec,
    poisoning_rate: float,
    fl_config: FLConfig,
    supplementary: SupplementaryDataset | None = None,
    round_idx: int = 0,
    lr: float | None = None,
    seed: int = 0,
) -> RoundUpdate:
    """All-source backdoor baseline: every stamped sample relabeled to the
    target. Runs through the same engine as the source-specified path with
    all non-target classes specified."""
    plan = AttackPlan.all_source(
        target_class,
        dataset.num_classes,
        poisoning_rate=poisoning_rate,
        use_supplementary=supplementary is not None,
    )
    return stage2_local_train(
        spec,
        global_params,
        dataset,
        partition,
        supplementary,
        plan,
        trigger,
        fl_config,
        round_idx=round_idx,
        lr=lr,
        seed=seed,
    )
