"""Diagonal-Fisher sharpness estimation and blockwise aggregation.

The estimator needs a single mini-batch gradient: sample labels from the
model's own softmax, differentiate the cross-entropy against them, and
square elementwise, h = B * g (.) g. Group statistics are reported per
block type, per layer, or per (block type, layer) block, on both the
arithmetic and the logarithmic scale.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import BLOCK_TYPES, BlockType, ParamSpec, TransformerModel

# Floor applied to exact zeros before taking logs; quantiles stay unfloored.
LOG_FLOOR = 1e-40

GROUPINGS = ("block_type", "layer", "block")

CSV_COLUMNS = (
    "step", "grouping", "group", "count",
    "s_arith", "mean_log_h", "q05", "q25", "q50", "q75", "q95",
)


@dataclass
class FisherConfig:
    batch_size: int = 64  # sequences per measurement batch
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class GroupStats:
    group: str
    count: int
    s_arith: float
    mean_log_h: float
    quantiles: tuple  # (q05, q25, q50, q75, q95)


@dataclass
class SharpnessReport:
    step: int
    grouping: str
    mode: str
    groups: list[GroupStats] = field(default_factory=list)

    def values(self) -> dict[str, float]:
        """Headline per-group statistic selected by the report's mode."""
        if self.mode == "arith":
            return {g.group: g.s_arith for g in self.groups}
        return {g.group: g.mean_log_h for g in self.groups}

    def counts(self) -> dict[str, int]:
        return {g.group: g.count for g in self.groups}

    def csv_rows(self) -> list[dict]:
        return [
            {
                "step": self.step,
                "grouping": self.grouping,
                "group": g.group,
                "count": g.count,
                "s_arith": repr(g.s_arith),
                "mean_log_h": repr(g.mean_log_h),
                "q05": repr(g.quantiles[0]),
                "q25": repr(g.quantiles[1]),
                "q50": repr(g.quantiles[2]),
                "q75": repr(g.quantiles[3]),
                "q95": repr(g.quantiles[4]),
            }
            for g in self.groups
        ]


def sample_soft_labels(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Categorical draw per position from the row softmax of the logits."""
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(size=logits.shape[:-1] + (1,))
    labels = (u > cdf).sum(axis=-1)
    return np.minimum(labels, logits.shape[-1] - 1)


def fisher_diag(
    model: TransformerModel,
    batch: np.ndarray,
    rng: np.random.Generator,
    labels: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Diagonal Fisher estimate h = B * g (.) g from one batch gradient.

    `batch` holds B token windows (B, T+1); labels are sampled from the
    model's softmax unless pinned explicitly (tests pin them).
    """
    batch = np.atleast_2d(np.asarray(batch))
    b = batch.shape[0]
    with ad.Tape() as tape:
        logits = model.logits(batch[:, :-1])
        if labels is None:
            labels = sample_soft_labels(logits.data, rng)
        loss = ad.cross_entropy_next_token(logits, labels)
        grads = tape.backward(loss, model.params)
    return {pid: b * g * g for pid, g in grads.items()}


def _group_key(spec: ParamSpec, grouping: str) -> str:
    if grouping == "block_type":
        return spec.block_type.value
    if grouping == "layer":
        return str(spec.layer)
    if grouping == "block":
        return f"{spec.block_type.value}/{spec.layer}"
    raise ValueError(f"unknown grouping {grouping!r}")


def block_sharpness(
    h: dict[str, np.ndarray],
    registry: list[ParamSpec],
    grouping: str = "block_type",
    mode: str = "log",
    step: int = 0,
) -> SharpnessReport:
    """Aggregate a diagonal-Fisher map over parameter groups.

    The arithmetic statistic is sum(h)/#params per group; the log
    statistic is mean(log h) with exact zeros floored at LOG_FLOOR.
    Quantiles (5/25/50/75/95%) are computed on the raw values.
    """
    if mode not in ("arith", "log"):
        raise ValueError(f"unknown mode {mode!r}")
    buckets: dict[str, list[np.ndarray]] = {}
    for spec in registry:
        if spec.id not in h:
            raise KeyError(f"sharpness map missing parameter {spec.id!r}")
        buckets.setdefault(_group_key(spec, grouping), []).append(h[spec.id].reshape(-1))
    report = SharpnessReport(step=step, grouping=grouping, mode=mode)
    for group in sorted(buckets, key=_group_sort_key):
        vals = np.concatenate(buckets[group])
        if vals.size == 0:
            raise ValueError(f"empty parameter group {group!r}")
        qs = np.quantile(vals, (0.05, 0.25, 0.5, 0.75, 0.95))
        report.groups.append(
            GroupStats(
                group=group,
                count=int(vals.size),
                s_arith=float(vals.mean()),
                mean_log_h=float(np.mean(np.log(np.maximum(vals, LOG_FLOOR)))),
                quantiles=tuple(float(q) for q in qs),
            )
        )
    return report


def _group_sort_key(group: str):
    order = {bt.value: i for i, bt in enumerate(BLOCK_TYPES)}
    if group in order:
        return (0, order[group], 0)
    if group.isdigit():
        return (1, int(group), 0)
    bt, _, layer = group.partition("/")
    return (2, int(layer) if layer.isdigit() else 0, order.get(bt, 9))


def block_param_norms(model: TransformerModel) -> tuple[dict, dict]:
    """Frobenius norm per tensor, and the layer-averaged mean per block type."""
    per_tensor = {
        pid: float(np.linalg.norm(t.data)) for pid, t in model.params.items()
    }
    by_type: dict[str, list[float]] = {}
    for spec in model.registry:
        by_type.setdefault(spec.block_type.value, []).append(per_tensor[spec.id])
    per_type = {bt: float(np.mean(v)) for bt, v in by_type.items()}
    return per_type, per_tensor


def reports_to_csv(reports: list[SharpnessReport]) -> str:
    """Serialize reports to the documented CSV schema, one row per group."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        for row in rep.csv_rows():
            writer.writerow(row)
    return buf.getvalue()
