"""Poisoned-class detection by clustering feature-tap activations.

Poisoned training data plants a second mode inside the target class: its
samples activate trigger features instead of class features. Per class,
activations are projected to a few principal components and split with
2-means; a high silhouette score means two genuinely separated clusters
and flags the class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans
from sklearn.decomposition import PCA
from sklearn.metrics import silhouette_score

from ..models import ClassifierSpec, ModelParams, forward_classify
from ..seeding import derive_seed
from .report import DetectionReport


@dataclass(frozen=True)
class ACConfig:
    projection_dims: int = 10
    silhouette_threshold: float = 0.15
    min_cluster_size: int = 10  # classes below 2x this are skipped
    seed: int = 0


def class_silhouette(features: np.ndarray, config: ACConfig) -> float:
    """Silhouette of the 2-means split of one class's projected activations."""
    dims = min(config.projection_dims, features.shape[0] - 1, features.shape[1])
    if dims >= 1 and dims < features.shape[1]:
        features = PCA(n_components=dims, random_state=config.seed).fit_transform(features)
    kmeans = KMeans(n_clusters=2, n_init=10, random_state=config.seed).fit(features)
    if len(np.unique(kmeans.labels_)) < 2:
        return 0.0
    return float(silhouette_score(features, kmeans.labels_))


def ac_detect(
    spec: ClassifierSpec,
    params: ModelParams,
    pool_images: np.ndarray,
    pool_labels: np.ndarray,
    ground_truth_target: int | None = None,
    config: ACConfig = ACConfig(),
) -> DetectionReport:
    """Cluster last-hidden activations per class and flag split classes.

    The pool must be training data as used (poisoned samples included
    under their training labels); that access requirement is the method's
    main practical cost in a federated setting.
    """
    pool_labels = np.asarray(pool_labels)
    scores: dict[int, float] = {}
    report_warnings: list[str] = []
    flagged: list[int] = []
    _, feats = forward_classify(spec, params, pool_images)
    for cls in range(spec.num_classes):
        idx = np.flatnonzero(pool_labels == cls)
        if len(idx) < 2 * config.min_cluster_size:
            report_warnings.append(
                f"class {cls}: only {len(idx)} samples, below 2x min cluster size; skipped"
            )
            continue
        score = class_silhouette(feats[idx], config)
        scores[cls] = score
        if score > config.silhouette_threshold:
            flagged.append(cls)
    return DetectionReport(
        method="activation_clustering",
        flagged_classes=flagged,
        anomaly_scores=scores,
        ground_truth_target=ground_truth_target,
        warnings=report_warnings,
    )
