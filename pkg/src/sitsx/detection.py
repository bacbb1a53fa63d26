"""Mean-cosine-distance scoring, thresholding and evaluation metrics."""

from __future__ import annotations

import csv
import dataclasses
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .errors import DegenerateLabels
from .objectives import _as_tensor, pairwise_cosine_distance

TAU_POLICIES = ("test-grid", "validation-selected", "fixed")


def mcd(latents) -> torch.Tensor:
    """Mean cosine distance of every pre-event latent to the last one.

    Accepts ``(T, d)`` or batched ``(..., T, d)`` latents.
    """
    h = _as_tensor(latents)
    if h.dim() < 2 or h.shape[-2] < 2:
        raise ValueError(f"mcd needs (..., T>=2, d) latents, got {tuple(h.shape)}")
    D = pairwise_cosine_distance(h)
    return D[..., :-1, -1].mean(dim=-1)


def threshold_decision(mcd_value: float, tau: float) -> int:
    """1 iff the score reaches the threshold (inclusive)."""
    return int(mcd_value >= tau)


@dataclass(frozen=True)
class DetectionScore:
    mcd: float
    decision: int | None = None
    threshold_used: float | None = None


def detect(scores, tau: float) -> list[DetectionScore]:
    return [DetectionScore(float(s), threshold_decision(float(s), tau), tau) for s in scores]


def _check_labels(labels: np.ndarray, need_negative: bool = True) -> None:
    n_pos = int(labels.sum())
    if n_pos == 0 or (need_negative and n_pos == len(labels)):
        raise DegenerateLabels(f"need both classes, got {n_pos} positives of {len(labels)}")


def _ranked_counts(scores, labels):
    """Distinct thresholds (descending) with cumulative TP/FP at each."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(1 - y)[last_of_group]
    return s[last_of_group], tp, fp


def average_precision(scores, labels) -> float:
    """Step-wise AP: sum over distinct thresholds of (R_k - R_{k-1}) * P_k.

    Equal scores form a single threshold step.
    """
    y = np.asarray(labels).astype(np.int64)
    _check_labels(y)
    _, tp, fp = _ranked_counts(scores, y)
    n_pos = int(y.sum())
    ap, prev_r = 0.0, 0.0
    for t, f in zip(tp.tolist(), fp.tolist()):
        r = t / n_pos
        ap += (r - prev_r) * (t / (t + f))
        prev_r = r
    return ap


def precision_recall_curve(scores, labels):
    y = np.asarray(labels).astype(np.int64)
    _check_labels(y, need_negative=False)
    thr, tp, fp = _ranked_counts(scores, y)
    return tp / (tp + fp), tp / y.sum(), thr


def default_grid(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    return np.unique(np.r_[u[0], (u[:-1] + u[1:]) / 2.0, u[-1]])


def f1_grid_search(scores, labels, grid=None) -> tuple[float, float, float, float]:
    """Threshold maximising F1 over ``grid``; ties go to the largest threshold.

    Returns ``(f1, tau, precision, recall)``.  The default grid is every
    midpoint between adjacent distinct scores plus the two extremes.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    _check_labels(y, need_negative=False)
    grid = default_grid(s) if grid is None else np.asarray(grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise ValueError("threshold grid is empty")
    grid = np.sort(grid)[::-1]

    pos_sorted = np.sort(s[y == 1])
    neg_sorted = np.sort(s[y == 0])
    tp = len(pos_sorted) - np.searchsorted(pos_sorted, grid, side="left")
    fp = len(neg_sorted) - np.searchsorted(neg_sorted, grid, side="left")
    fn = len(pos_sorted) - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(tp > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    i = int(np.argmax(f1))
    precision = tp[i] / (tp[i] + fp[i]) if tp[i] + fp[i] else 0.0
    recall = tp[i] / len(pos_sorted)
    return float(f1[i]), float(grid[i]), float(precision), float(recall)


def metrics_at(scores, labels, tau: float) -> tuple[float, float, float]:
    """``(f1, precision, recall)`` of the inclusive decision ``score >= tau``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    pred = s >= tau
    tp = int((pred & (y == 1)).sum())
    fp = int((pred & (y == 0)).sum())
    fn = int((~pred & (y == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return f1, precision, recall


@dataclass
class EvalReport:
    ap: float | None
    f1: float
    precision: float
    recall: float
    best_threshold: float
    tau_policy: str
    n_pos: int
    n_neg: int
    per_type: dict[str, dict] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _metrics(scores, labels, tau_policy, tau):
    y = np.asarray(labels).astype(np.int64)
    n_pos = int(y.sum())
    ap = average_precision(scores, y) if 0 < n_pos < len(y) else None
    if tau_policy == "test-grid":
        if n_pos == 0:
            return ap, 0.0, 0.0, 0.0, float("nan")
        f1, tau, p, r = f1_grid_search(scores, y)
    else:
        f1, p, r = metrics_at(scores, y, tau)
    return ap, f1, p, r, tau


def evaluate_scores(scores, labels, disaster_types=None, tau_policy: str = "test-grid",
                    tau: float | None = None, meta: dict | None = None) -> EvalReport:
    """Metrics for precomputed scores.

    ``test-grid`` searches the F1 threshold on these scores; the other
    policies apply the given ``tau``.  Per-type rows reuse the policy.
    """
    if tau_policy not in TAU_POLICIES:
        raise ValueError(f"unknown tau policy {tau_policy!r}")
    if tau_policy != "test-grid" and tau is None:
        raise ValueError(f"tau policy {tau_policy!r} needs a threshold")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    _check_labels(y, need_negative=False)
    ap, f1, p, r, used = _metrics(s, y, tau_policy, tau)
    per_type = {}
    if disaster_types is not None:
        groups = defaultdict(list)
        for i, t in enumerate(disaster_types):
            groups[t].append(i)
        for t in sorted(groups):
            idx = np.asarray(groups[t])
            t_ap, t_f1, t_p, t_r, t_tau = _metrics(s[idx], y[idx], tau_policy, tau)
            per_type[t] = {
                "ap": t_ap, "f1": t_f1, "precision": t_p, "recall": t_r, "threshold": t_tau,
                "n_pos": int(y[idx].sum()), "n_neg": int(len(idx) - y[idx].sum()),
            }
    return EvalReport(ap, f1, p, r, used, tau_policy, int(y.sum()), int(len(y) - y.sum()),
                      per_type, dict(meta or {}))


# --- scoring models ----------------------------------------------------------

Scorer = Callable[[np.ndarray], np.ndarray]


@torch.no_grad()
def encode_latents(model, images: np.ndarray, batch_size: int = 64) -> torch.Tensor:
    """Pooled eval-mode latents for uint8 ``(N, T, C, P, P)`` series."""
    was_training = model.training
    model.eval()
    out = []
    try:
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(images[i : i + batch_size]).float().div_(255.0)
            out.append(model.encode(x, sample=False).pooled)
    finally:
        model.train(was_training)
    return torch.cat(out)


def mcd_scorer(model, batch_size: int = 64) -> Scorer:
    def score(images):
        return mcd(encode_latents(model, images, batch_size).double()).numpy()

    return score


def evaluate(scorer: Scorer, dataset, split: str = "test", tau_policy: str = "test-grid",
             tau: float | None = None, meta: dict | None = None):
    """Score a dataset split and build its report.

    Returns ``(report, scores, split data)``.  With the
    ``validation-selected`` policy the threshold is grid-searched on the
    validation split first.
    """
    meta = dict(meta or {})
    if tau_policy == "validation-selected":
        val = dataset.load("val")
        _, tau, _, _ = f1_grid_search(scorer(val.images), val.labels)
        meta["tau_source"] = "val"
    data = dataset.load(split)
    scores = scorer(data.images)
    report = evaluate_scores(scores, data.labels, data.disaster_types, tau_policy, tau,
                             {**meta, "split": split, "n": len(data)})
    return report, scores, data


def write_scores(path, ids, scores, labels, disaster_types) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "score", "label", "disaster_type"])
        for row in zip(ids, scores, labels, disaster_types):
            w.writerow([row[0], f"{float(row[1]):.8f}", int(row[2]), row[3]])


def render_change_maps(out_dir, aoi_ids, patch_coords, decisions, cell: int = 8) -> list[Path]:
    """One PNG per AOI: the patch grid coloured by decision (red = event)."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grids = defaultdict(dict)
    for aoi, rc, dec in zip(aoi_ids, patch_coords, decisions):
        if aoi is not None and rc is not None:
            grids[aoi][tuple(rc)] = int(dec)
    written = []
    for aoi, cells in sorted(grids.items()):
        rows = max(r for r, _ in cells) + 1
        cols = max(c for _, c in cells) + 1
        img = np.zeros((rows, cols, 3), dtype=np.uint8)
        for (r, c), dec in cells.items():
            img[r, c] = (220, 40, 40) if dec else (90, 90, 90)
        path = out_dir / f"{aoi}_change_map.png"
        Image.fromarray(img).resize((cols * cell, rows * cell), Image.NEAREST).save(path)
        written.append(path)
    return written
