"""Attack evaluation: success rate, clean accuracy, the backdoor score.

Evaluation always runs on the held-out test split; generated samples never
enter it. The backdoor score is the harmonic mean of S1 (stamped
specified-class samples misclassified in any way, so S1 >= ASR) and S2
(stamped non-specified samples still classified correctly).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .backdoor import AttackPlan, TriggerSpec, apply_trigger
from .data import LabeledDataset
from .models import ClassifierSpec, predict_labels
from .params import ModelParams


@dataclass
class EvalReport:
    asr: float
    mta: float
    bs: float
    s1: float
    s2: float
    confusion_under_trigger: np.ndarray  # (N, N) counts, rows = true class
    round_idx: int
    delta_mta: float | None = None

    def to_json_dict(self) -> dict:
        payload = asdict(self)
        payload["confusion_under_trigger"] = self.confusion_under_trigger.tolist()
        return payload


def main_task_accuracy(spec: ClassifierSpec, params: ModelParams, test: LabeledDataset) -> float:
    """Top-1 accuracy on clean test samples from all classes."""
    return float(np.mean(predict_labels(spec, params, test.samples) == test.labels))


def _specified_slices(
    test: LabeledDataset, plan: AttackPlan
) -> tuple[np.ndarray, np.ndarray]:
    spec_mask = np.isin(test.labels, sorted(plan.specified_classes))
    return np.flatnonzero(spec_mask), np.flatnonzero(~spec_mask)


def attack_success_rate(
    spec: ClassifierSpec,
    params: ModelParams,
    test: LabeledDataset,
    plan: AttackPlan,
    trigger: TriggerSpec,
) -> float:
    """Fraction of stamped specified-class test samples predicted as the target."""
    s_idx, _ = _specified_slices(test, plan)
    if len(s_idx) == 0:
        raise ValueError("test set has no specified-class samples")
    stamped = apply_trigger(test.samples[s_idx], trigger)
    preds = predict_labels(spec, params, stamped)
    return float(np.mean(preds == plan.target_class))


def backdoor_score(
    spec: ClassifierSpec,
    params: ModelParams,
    test: LabeledDataset,
    plan: AttackPlan,
    trigger: TriggerSpec,
) -> tuple[float, float, float]:
    """(BS, S1, S2): harmonic mean of stamped-specified misclassification
    and stamped-non-specified robustness; BS is 0 when S1 + S2 = 0."""
    s_idx, ns_idx = _specified_slices(test, plan)
    if len(s_idx) == 0 or len(ns_idx) == 0:
        raise ValueError("test set must contain specified and non-specified samples")
    preds_s = predict_labels(spec, params, apply_trigger(test.samples[s_idx], trigger))
    preds_ns = predict_labels(spec, params, apply_trigger(test.samples[ns_idx], trigger))
    s1 = float(np.mean(preds_s != test.labels[s_idx]))
    s2 = float(np.mean(preds_ns == test.labels[ns_idx]))
    bs = 0.0 if s1 + s2 == 0 else 2.0 * s1 * s2 / (s1 + s2)
    return bs, s1, s2


def confusion_under_trigger(
    spec: ClassifierSpec,
    params: ModelParams,
    test: LabeledDataset,
    trigger: TriggerSpec,
) -> np.ndarray:
    """N x N counts of (true class, predicted class) with every sample stamped."""
    preds = predict_labels(spec, params, apply_trigger(test.samples, trigger))
    n = test.num_classes
    confusion = np.zeros((n, n), dtype=np.int64)
    np.add.at(confusion, (test.labels, preds), 1)
    return confusion


def evaluate_attack(
    spec: ClassifierSpec,
    params: ModelParams,
    test: LabeledDataset,
    plan: AttackPlan,
    trigger: TriggerSpec,
    round_idx: int = -1,
    clean_mta: float | None = None,
) -> EvalReport:
    """Full report; ``delta_mta`` is filled when the clean-twin MTA is given."""
    bs, s1, s2 = backdoor_score(spec, params, test, plan, trigger)
    mta = main_task_accuracy(spec, params, test)
    return EvalReport(
        asr=attack_success_rate(spec, params, test, plan, trigger),
        mta=mta,
        bs=bs,
        s1=s1,
        s2=s2,
        confusion_under_trigger=confusion_under_trigger(spec, params, test, trigger),
        round_idx=round_idx,
        delta_mta=None if clean_mta is None else clean_mta - mta,
    )


def append_report(path: str | Path, report: EvalReport) -> None:
    """One JSON-lines record per evaluation."""
    with open(path, "a") as f:
        f.write(json.dumps(report.to_json_dict()) + "\n")


def save_confusion_csv(path: str | Path, confusion: np.ndarray) -> None:
    np.savetxt(path, confusion, fmt="%d", delimiter=",")


def save_confusion_heatmap(path: str | Path, confusion: np.ndarray, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rates = confusion / np.maximum(confusion.sum(axis=1, keepdims=True), 1)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(rates, cmap="viridis", vmin=0, vmax=1)
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
