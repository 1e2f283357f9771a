"""Evaluation metrics and token-budget accounting."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import SegSample
from .errors import StateError
from .merge import MergeRecord, stage_token_counts
from .model import Model, ModelConfig, strip_boundary_head


@dataclass
class Metrics:
    miou: float
    f1: float
    pixel_acc: float
    per_class_iou: dict[int, float]
    token_counts: list[int]
    activation_elements: int


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """(K, K) counts with rows = truth class, cols = predicted class."""
    if pred.shape != truth.shape:
        raise StateError(f"prediction {pred.shape} vs truth {truth.shape}")
    if truth.max(initial=0) >= num_classes or pred.max(initial=0) >= num_classes:
        raise StateError("class id outside confusion matrix range")
    idx = truth.reshape(-1) * num_classes + pred.reshape(-1)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def scores_from_confusion(cm: np.ndarray) -> tuple[float, float, float, dict[int, float]]:
    """mIoU, macro-F1, and pixel accuracy over classes present in truth or prediction."""
    tp = np.diag(cm).astype(np.float64)
    row = cm.sum(axis=1).astype(np.float64)   # truth mass
    col = cm.sum(axis=0).astype(np.float64)   # prediction mass
    present = (row + col) > 0
    union = row + col - tp
    per_class = {int(c): float(tp[c] / union[c]) for c in np.flatnonzero(present)}
    ious = np.array(list(per_class.values()))
    f1s = np.array([2.0 * tp[c] / (row[c] + col[c]) for c in np.flatnonzero(present)])
    acc = float(tp.sum() / cm.sum()) if cm.sum() else 0.0
    return float(ious.mean()), float(f1s.mean()), acc, per_class


def evaluate(model: Model, samples: list[SegSample]) -> Metrics:
    """Argmax segmentation metrics; the boundary head is stripped first."""
    if model.cfg.use_boundary_head:
        model = strip_boundary_head(model)
    k = model.cfg.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    record = None
    for s in samples:
        if s.labels.max(initial=0) >= k:
            raise StateError(f"label {s.labels.max()} outside the model's {k} classes")
        out = model.forward(s.image)
        pred = np.argmax(out.final_logits.data, axis=0)
        cm += confusion_matrix(pred, s.labels, k)
        record = out.record
    miou, f1, acc, per_class = scores_from_confusion(cm)
    if record is None:
        counts = stage_token_counts(model.cfg.grid_tokens, model.cfg.merge_ratio,
                                    model.cfg.num_stages)
    else:
        counts = record.token_counts
    return Metrics(miou=miou, f1=f1, pixel_acc=acc, per_class_iou=per_class,
                   token_counts=counts,
                   activation_elements=sum(c * model.cfg.embed_dim for c in counts))


# ---------------------------------------------------------------------------
# token-budget accounting
# ---------------------------------------------------------------------------

@dataclass
class BudgetReport:
    token_counts: list[int]
    attention_proxy: int          # sum of squared per-stage token counts
    activation_elements: int      # sum of per-stage token count * embed dim
    embed_dim: int


def report_budget(record: MergeRecord, cfg: ModelConfig) -> BudgetReport:
    counts = list(record.token_counts)
    return BudgetReport(
        token_counts=counts,
        attention_proxy=sum(c * c for c in counts),
        activation_elements=sum(c * cfg.embed_dim for c in counts),
        embed_dim=cfg.embed_dim,
    )


def nominal_record(cfg: ModelConfig) -> MergeRecord:
    """The record implied by the ceil recurrence alone (block-contiguous maps)."""
    counts = stage_token_counts(cfg.grid_tokens, cfg.merge_ratio, cfg.num_stages)
    maps = []
    for n, m in zip(counts, counts[1:]):
        maps.append(np.minimum(np.arange(n, dtype=np.int64) * m // n, m - 1))
    return MergeRecord.from_maps(maps)


def budget_table(report: BudgetReport) -> str:
    lines = ["stage  tokens  attention(**2)  activations"]
    for i, c in enumerate(report.token_counts):
        stage = "input" if i == 0 else f"{i:5d}"
        lines.append(f"{stage:>5}  {c:6d}  {c * c:14d}  {c * report.embed_dim:11d}")
    lines.append(f"total  {'':6}  {report.attention_proxy:14d}  {report.activation_elements:11d}")
    return "\n".join(lines)


def budget_json(report: BudgetReport) -> str:
    return json.dumps({
        "token_counts": report.token_counts,
        "attention_proxy": report.attention_proxy,
        "activation_elements": report.activation_elements,
        "embed_dim": report.embed_dim,
    }, indent=2, sort_keys=True)
