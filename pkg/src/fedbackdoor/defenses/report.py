"""Shared detection-report record."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path


@dataclass
class DetectionReport:
    method: str  # "neural_cleanse" | "activation_clustering"
    flagged_classes: list[int]
    anomaly_scores: dict[int, float]
    ground_truth_target: int | None
    warnings: list[str]

    @property
    def detected(self) -> bool:
        return self.ground_truth_target is not None and (
            self.ground_truth_target in self.flagged_classes
        )

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "flagged_classes": self.flagged_classes,
            "anomaly_scores": {str(k): v for k, v in self.anomaly_scores.items()},
            "ground_truth_target": self.ground_truth_target,
            "detected": self.detected,
            "warnings": self.warnings,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))
