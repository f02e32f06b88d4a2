"""Prediction head, task/total losses, and the evaluation metrics.

Metric conventions: intensity predictions are clamped only inside the
classification metrics, never in the loss.  Seven-class binning rounds half
away from zero so the bins are symmetric around neutral.  Binary accuracy
defaults to the exclude-zero convention (drop exactly-neutral labels, compare
signs); the nonnegative-vs-negative convention is available as a mode.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .alignment import LossBreakdown
from .errors import ShapeError

ACC2_MODES = ("exclude_zero", "nonneg_vs_neg")


class PredictionHead(nn.Module):
    """Concatenated tokens -> hidden ReLU layer -> scalar intensity."""

    def __init__(self, in_dim: int, hidden_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, 1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.fc1.in_features:
            raise ShapeError(
                f"head expects width {self.fc1.in_features}, got {features.shape[-1]}"
            )
        return self.fc2(torch.relu(self.fc1(features))).squeeze(-1)


def predict_head(tokens, head: PredictionHead) -> torch.Tensor:
    """Apply the head to a TokenSet-like 4-tuple of [N, d_model] tensors."""
    return head(torch.cat(list(tokens), dim=-1))


def task_loss(pred: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and annotated intensity."""
    if pred.shape != labels.shape:
        raise ShapeError(f"pred shape {tuple(pred.shape)} != labels {tuple(labels.shape)}")
    return ((pred - labels) ** 2).mean()


def total_loss(task: torch.Tensor, breakdown: LossBreakdown, omega: float) -> LossBreakdown:
    """Complete a partial breakdown: total = task + omega * align."""
    return dataclasses.replace(
        breakdown, task=task, total=task + omega * breakdown.align, omega=omega
    )


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def _seven_class(values: np.ndarray) -> np.ndarray:
    # round half away from zero, then clamp to the seven integer bins
    rounded = np.copysign(np.floor(np.abs(values) + 0.5), values)
    return np.clip(rounded, -3, 3)


def acc7(pred, labels) -> float:
    """Fraction of samples whose rounded-and-clamped prediction hits the
    label's integer bin in {-3..3}."""
    pred, labels = _as_numpy(pred), _as_numpy(labels)
    if pred.size == 0:
        raise ValueError("acc7 needs at least one sample")
    if pred.shape != labels.shape:
        raise ShapeError(f"pred shape {pred.shape} != labels {labels.shape}")
    return float(np.mean(_seven_class(pred) == _seven_class(labels)))


def _binary_f1(pred_pos: np.ndarray, true_pos: np.ndarray) -> tuple[float, float]:
    """Support-weighted mean of the two per-class F1 scores, plus accuracy."""
    accuracy = float(np.mean(pred_pos == true_pos))
    f1_parts = []
    supports = []
    for positive in (True, False):
        tp = np.sum((pred_pos == positive) & (true_pos == positive))
        fp = np.sum((pred_pos == positive) & (true_pos != positive))
        fn = np.sum((pred_pos != positive) & (true_pos == positive))
        denom = 2 * tp + fp + fn
        f1_parts.append(2 * tp / denom if denom > 0 else 0.0)
        supports.append(np.sum(true_pos == positive))
    total = sum(supports)
    weighted = sum(f * s for f, s in zip(f1_parts, supports)) / total
    return accuracy, float(weighted)


def acc2_f1(pred, labels, mode: str = "exclude_zero") -> tuple[float, float]:
    """Binary accuracy and support-weighted F1 over sentiment polarity.

    exclude_zero: samples with label exactly 0 are dropped; polarity is the
    sign (predictions <= 0 count as negative).  nonneg_vs_neg: all samples
    kept; polarity is value >= 0.
    """
    if mode not in ACC2_MODES:
        raise ValueError(f"mode must be one of {ACC2_MODES}, got {mode!r}")
    pred, labels = _as_numpy(pred).astype(np.float64), _as_numpy(labels).astype(np.float64)
    if pred.shape != labels.shape:
        raise ShapeError(f"pred shape {pred.shape} != labels {labels.shape}")
    if mode == "exclude_zero":
        keep = labels != 0
        if not keep.any():
            raise ValueError("exclude_zero mode needs at least one nonzero label")
        pred_pos = pred[keep] > 0
        true_pos = labels[keep] > 0
    else:
        pred_pos = pred >= 0
        true_pos = labels >= 0
    return _binary_f1(pred_pos, true_pos)


@dataclass
class MetricsReport:
    """Per-split evaluation summary; mse is logged for monitoring only."""

    acc2: float
    f1: float
    acc7: float
    mse: float
    acc2_mode: str = "exclude_zero"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, values: dict) -> "MetricsReport":
        return cls(**values)


def compute_metrics(pred, labels, acc2_mode: str = "exclude_zero") -> MetricsReport:
    """All metrics for one split in a single call."""
    pred_np, labels_np = _as_numpy(pred), _as_numpy(labels)
    accuracy, weighted_f1 = acc2_f1(pred_np, labels_np, mode=acc2_mode)
    return MetricsReport(
        acc2=accuracy,
        f1=weighted_f1,
        acc7=acc7(pred_np, labels_np),
        mse=float(np.mean((pred_np - labels_np) ** 2)),
        acc2_mode=acc2_mode,
    )
