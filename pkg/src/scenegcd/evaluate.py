"""Clustering accuracy under optimal matching, quadrant breakdowns, deviations.

Predicted cluster ids are aligned to ground-truth classes with a single
min-cost assignment over the full unlabeled set; base/novel and quadrant
accuracies restrict the matched-correct indicator to their subsets under
that one matching.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import Quadrant


@dataclass
class EvalReport:
    acc_all: float
    acc_base: float | None
    acc_novel: float | None
    n_all: int
    n_base: int
    n_novel: int
    matching: np.ndarray  # matching[predicted_id] -> ground-truth id
    quadrant_acc: dict[Quadrant, float] | None = None
    quadrant_n: dict[Quadrant, int] | None = None

    def to_dict(self) -> dict:
        d = {
            "acc_all": self.acc_all,
            "acc_base": self.acc_base,
            "acc_novel": self.acc_novel,
            "n_all": self.n_all,
            "n_base": self.n_base,
            "n_novel": self.n_novel,
            "matching": [int(v) for v in self.matching],
        }
        if self.quadrant_acc is not None:
            d["quadrant_acc"] = {q.value: a for q, a in self.quadrant_acc.items()}
            d["quadrant_n"] = {q.value: n for q, n in (self.quadrant_n or {}).items()}
        return d

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass
class DeviationStats:
    mean_dev: float  # mean over batch and dimensions of (v_x - v_o)
    l1_dev: float    # mean over batch of per-dimension-averaged |v_x - v_o|
    step: int = 0


def _optimal_cost(cost: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def assignment_solve(cost: np.ndarray) -> np.ndarray:
    """Min-cost bijection rows -> columns, lexicographically smallest on ties.

    Ties between equally cheap assignments are broken by fixing, row by row,
    the smallest column that still admits an optimal completion.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    k = cost.shape[0]
    best = _optimal_cost(cost)
    # Tolerance above float summation error, far below any genuine cost gap.
    tol = max(1.0, float(np.abs(cost).max())) * k * 1e-12
    perm = np.empty(k, dtype=int)
    available = list(range(k))
    fixed = 0.0
    for row in range(k):
        rest_rows = np.arange(row + 1, k)
        for col in available:
            rest_cols = np.array([c for c in available if c != col], dtype=int)
            remainder = 0.0
            if rest_rows.size:
                remainder = _optimal_cost(cost[np.ix_(rest_rows, rest_cols)])
            if fixed + cost[row, col] + remainder <= best + tol:
                perm[row] = col
                fixed += cost[row, col]
                available.remove(col)
                break
        else:  # pragma: no cover - the optimal column always verifies
            raise RuntimeError("no admissible column found; tolerance too tight")
    return perm


def cluster_acc(
    y_true, y_pred, base_classes, n_classes: int | None = None
) -> EvalReport:
    """Accuracy under the optimal prediction-to-class matching.

    One matching, computed over all instances, is reused for the base and
    novel breakdowns so subset scores stay comparable.
    """
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError("y_true and y_pred must be equal-length 1-d arrays")
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty label list")
    k = int(max(y_true.max(), y_pred.max())) + 1 if n_classes is None else n_classes
    if y_true.min() < 0 or y_pred.min() < 0 or max(y_true.max(), y_pred.max()) >= k:
        raise ValueError(f"labels out of range [0, {k})")
    contingency = np.zeros((k, k), dtype=np.int64)
    np.add.at(contingency, (y_pred, y_true), 1)
    matching = assignment_solve(-contingency.astype(float))
    correct = matching[y_pred] == y_true
    base = np.isin(y_true, sorted(base_classes))
    novel = ~base
    return EvalReport(
        acc_all=float(correct.mean()),
        acc_base=float(correct[base].mean()) if base.any() else None,
        acc_novel=float(correct[novel].mean()) if novel.any() else None,
        n_all=int(y_true.size),
        n_base=int(base.sum()),
        n_novel=int(novel.sum()),
        matching=matching,
    )


def quadrant_report(
    y_true, y_pred, quadrants, matching: np.ndarray
) -> tuple[dict[Quadrant, float], dict[Quadrant, int]]:
    """Per-quadrant accuracy under an already-computed matching.

    `quadrants` aligns with the labels; entries may be None for unannotated
    samples. Buckets with no instances are left out rather than reported as 0.
    """
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if not (len(y_true) == len(y_pred) == len(quadrants)):
        raise ValueError("labels and quadrants must align")
    if all(q is None for q in quadrants):
        raise ValueError("no quadrant annotations present")
    correct = matching[y_pred] == y_true
    accs: dict[Quadrant, float] = {}
    counts: dict[Quadrant, int] = {}
    for q in Quadrant:
        mask = np.array([qq == q for qq in quadrants])
        if mask.any():
            accs[q] = float(correct[mask].mean())
            counts[q] = int(mask.sum())
    return accs, counts


def feature_deviation(v_x, v_o, step: int = 0) -> DeviationStats:
    """Mean and per-dimension L1 deviation between image and object features."""
    v_x = np.asarray(v_x, dtype=float)
    v_o = np.asarray(v_o, dtype=float)
    if v_x.shape != v_o.shape or v_x.ndim != 2:
        raise ValueError(f"feature batches must align, got {v_x.shape} vs {v_o.shape}")
    diff = v_x - v_o
    return DeviationStats(
        mean_dev=float(diff.mean()),
        l1_dev=float(np.abs(diff).sum(axis=1).mean() / v_x.shape[1]),
        step=step,
    )


def export_embeddings(model, samples, path: str | Path, mask_provider,
                      batch_size: int = 64) -> int:
    """Write one `id,label,z_0..z_{p-1}` row per sample from the object branch."""
    import torch

    from .trainer import object_image_for

    model.eval()
    path = Path(path)
    rows = []
    dim = None
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            xs = np.stack([s.image for s in chunk]).astype(np.float32)
            os_ = np.stack([object_image_for(s, mask_provider) for s in chunk])
            x_t = torch.from_numpy(xs).permute(0, 3, 1, 2)
            o_t = torch.from_numpy(os_).permute(0, 3, 1, 2)
            _, obj, _ = model.forward_dual(x_t, o_t)
            z = obj.z.cpu().numpy()
            dim = z.shape[1]
            for s, vec in zip(chunk, z):
                rows.append(f"{s.id},{s.object_label}," + ",".join(repr(float(v)) for v in vec))
    header = "id,label," + ",".join(f"z_{i}" for i in range(dim or 0))
    path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
    return len(rows)
