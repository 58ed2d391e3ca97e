"""Trigger reverse-engineering with MAD outlier scoring.

For every candidate target class, gradient descent searches for the
smallest (mask, pattern) pair that flips a clean sample pool to that
class; a backdoored target stands out because a tiny mask suffices. The
per-class mask L1 norms are scored with the median absolute deviation:
classes whose norm sits far below the median get flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..models import ClassifierSpec, build_with_params, to_nchw
from ..params import ModelParams
from ..seeding import rng_for
from .report import DetectionReport

MAD_CONSISTENCY = 1.4826  # scales MAD to the stddev of a normal distribution


@dataclass(frozen=True)
class NCConfig:
    steps_per_restart: int = 100
    restarts: int = 3
    lr: float = 0.1
    mask_weight: float = 0.01  # L1 regularization on the mask
    batch_size: int = 64
    success_floor: float = 0.75  # flip rate a trigger must reach
    anomaly_threshold: float = 2.0
    samples_per_class: int = 100  # size of the clean pool granted per class
    seed: int = 0


@dataclass
class ReversedTrigger:
    target_class: int
    mask: np.ndarray  # (H, W) in [0, 1]
    pattern: np.ndarray  # (H, W, C) in [0, 1]
    mask_l1: float
    flip_rate: float
    low_confidence: bool
    trace: list[tuple[int, float, float]] = field(default_factory=list)  # (step, l1, flip)


def _stamp(x: torch.Tensor, mask: torch.Tensor, pattern: torch.Tensor) -> torch.Tensor:
    return (1.0 - mask) * x + mask * pattern


def nc_reverse_trigger(
    spec: ClassifierSpec,
    params: ModelParams,
    target_class: int,
    pool: np.ndarray,
    config: NCConfig = NCConfig(),
    budget: int | None = None,
) -> ReversedTrigger:
    """Search for a minimal trigger flipping the pool to ``target_class``.

    Mask and pattern live behind sigmoids so the box constraint holds by
    construction. Optimization runs ``restarts`` warm restarts (Adam state
    reset, variables kept); the returned iterate is the best by
    flip-rate-floor-then-L1 order, with a low-confidence flag when no
    iterate reached the floor. ``budget`` caps total steps; 0 returns the
    initial iterate.
    """
    model = build_with_params(spec, params)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)

    h, w, c = spec.input_shape
    total_steps = (
        config.steps_per_restart * config.restarts if budget is None else int(budget)
    )
    rng = rng_for(config.seed, "nc", target_class)
    x_pool = to_nchw(pool)
    targets_all = torch.full((len(pool),), target_class, dtype=torch.long)

    mask_logit = torch.full((1, 1, h, w), -3.0, requires_grad=True)
    pattern_logit = torch.zeros((1, c, h, w), requires_grad=True)

    def current() -> tuple[np.ndarray, np.ndarray, float, float]:
        with torch.no_grad():
            m = torch.sigmoid(mask_logit)
            p = torch.sigmoid(pattern_logit)
            preds = model(_stamp(x_pool, m, p)).argmax(dim=1)
            flip = float((preds == targets_all).float().mean())
            l1 = float(m.abs().sum())
        return (
            m[0, 0].numpy().copy(),
            p[0].numpy().transpose(1, 2, 0).copy(),
            l1,
            flip,
        )

    best: tuple[np.ndarray, np.ndarray, float, float] | None = None
    trace: list[tuple[int, float, float]] = []

    def consider(step: int) -> None:
        nonlocal best
        cand = current()
        trace.append((step, cand[2], cand[3]))
        if best is None:
            best = cand
            return
        cand_ok = cand[3] >= config.success_floor
        best_ok = best[3] >= config.success_floor
        if cand_ok and not best_ok:
            best = cand
        elif cand_ok and best_ok and cand[2] < best[2]:
            best = cand
        elif not cand_ok and not best_ok and cand[3] > best[3]:
            best = cand

    consider(0)
    step = 0
    while step < total_steps:
        optimizer = torch.optim.Adam([mask_logit, pattern_logit], lr=config.lr)
        restart_steps = min(config.steps_per_restart, total_steps - step)
        for _ in range(restart_steps):
            idx = rng.choice(len(pool), size=min(config.batch_size, len(pool)), replace=False)
            xb = x_pool[idx]
            m = torch.sigmoid(mask_logit)
            p = torch.sigmoid(pattern_logit)
            logits = model(_stamp(xb, m, p))
            loss = torch.nn.functional.cross_entropy(
                logits, targets_all[: len(idx)]
            ) + config.mask_weight * m.abs().sum()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
        consider(step)

    mask, pattern, l1, flip = best
    return ReversedTrigger(
        target_class=target_class,
        mask=mask,
        pattern=pattern,
        mask_l1=l1,
        flip_rate=flip,
        low_confidence=flip < config.success_floor,
        trace=trace,
    )


def mad_anomaly_indices(l1_norms: np.ndarray) -> tuple[np.ndarray, bool]:
    """Per-class |deviation| / (1.4826 * MAD) scores.

    Zero deviations score 0 even when MAD is 0 (all-equal case); nonzero
    deviations over a zero MAD score infinity. Returns (scores, degenerate)
    where degenerate marks MAD == 0.
    """
    l1_norms = np.asarray(l1_norms, dtype=np.float64)
    median = np.median(l1_norms)
    deviations = np.abs(l1_norms - median)
    mad = MAD_CONSISTENCY * np.median(deviations)
    scores = np.zeros_like(deviations)
    nonzero = deviations > 0
    if mad > 0:
        scores[nonzero] = deviations[nonzero] / mad
    else:
        scores[nonzero] = np.inf
    return scores, bool(mad == 0)


def nc_detect(
    spec: ClassifierSpec,
    params: ModelParams,
    pool_images: np.ndarray,
    pool_labels: np.ndarray,
    ground_truth_target: int | None = None,
    config: NCConfig = NCConfig(),
) -> tuple[DetectionReport, list[ReversedTrigger]]:
    """Reverse a trigger for every class and flag MAD outliers.

    A class is flagged when its anomaly index exceeds the threshold AND its
    mask L1 sits below the median (backdoors shrink masks, never grow them).
    The pool granted to the search holds ``samples_per_class`` clean images
    per non-target class.
    """
    num_classes = spec.num_classes
    rng = rng_for(config.seed, "nc-pool")
    reversed_triggers = []
    for cls in range(num_classes):
        keep = np.flatnonzero(pool_labels != cls)
        per_class_idx = []
        for other in range(num_classes):
            if other == cls:
                continue
            candidates = keep[pool_labels[keep] == other]
            take = min(config.samples_per_class, len(candidates))
            if take:
                per_class_idx.append(rng.choice(candidates, size=take, replace=False))
        pool = pool_images[np.concatenate(per_class_idx)]
        reversed_triggers.append(nc_reverse_trigger(spec, params, cls, pool, config))

    l1_norms = np.array([t.mask_l1 for t in reversed_triggers])
    scores, degenerate = mad_anomaly_indices(l1_norms)
    median = np.median(l1_norms)
    flagged = [
        int(cls)
        for cls in range(num_classes)
        if scores[cls] > config.anomaly_threshold and l1_norms[cls] < median
    ]
    report_warnings = []
    if degenerate:
        report_warnings.append("degenerate L1 distribution: MAD is zero")
    report_warnings += [
        f"class {t.target_class}: flip rate {t.flip_rate:.2f} below floor"
        for t in reversed_triggers
        if t.low_confidence
    ]
    report = DetectionReport(
        method="neural_cleanse",
        flagged_classes=flagged,
        anomaly_scores={int(c): float(scores[c]) for c in range(num_classes)},
        ground_truth_target=ground_truth_target,
        warnings=report_warnings,
    )
    return report, reversed_triggers


def save_trigger_grid(path, reversed_triggers: list[ReversedTrigger]) -> None:
    """Reversed masks and patterns, one column per class."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(reversed_triggers)
    fig, axes = plt.subplots(2, n, figsize=(1.1 * n, 2.4))
    for i, trig in enumerate(reversed_triggers):
        axes[0, i].imshow(trig.mask, cmap="gray", vmin=0, vmax=1)
        axes[0, i].set_title(f"{trig.target_class}\nL1={trig.mask_l1:.0f}", fontsize=7)
        shown = trig.pattern.squeeze(-1) if trig.pattern.shape[-1] == 1 else trig.pattern
        axes[1, i].imshow(shown, cmap="gray", vmin=0, vmax=1)
        for ax in (axes[0, i], axes[1, i]):
            ax.axis("off")
    fig.tight_layout(pad=0.3)
    fig.savefig(path, dpi=110)
    plt.close(fig)
