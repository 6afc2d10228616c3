"""Anomaly scoring and evaluation.

The anomaly signal is the per-sample mean squared reconstruction error;
bigger error means higher score. Scores are min-max scaled to [0, 1] over
the evaluated set. The abnormal class is the positive class for ROC/AUC.
AUC is computed as the tie-aware rank statistic
P(score_abnormal > score_normal) + 0.5 * P(tie); the trapezoidal area under
the exact ROC curve equals it and serves as a cross-check.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy.stats import rankdata

from . import losses, model
from .datasets import (
    ImageBatch,
    Label,
    PreprocessedPartition,
    batch_iterator,
)

DEFAULT_HISTOGRAM_BINS = 50


class SingleClassError(ValueError):
    """ROC/AUC need at least one record of each label."""


@dataclass
class ScoreRecord:
    source_id: int
    label: Label
    raw_error: float
    score: float


@dataclass
class HistogramPair:
    """Per-label counts on shared equal-width bins over [0, 1]."""

    bin_edges: np.ndarray
    normal: np.ndarray
    abnormal: np.ndarray


@dataclass
class EvalReport:
    records: list[ScoreRecord]
    roc_points: list[tuple[float, float, float]]  # (fpr, tpr, threshold)
    auc: float
    histograms: HistogramPair
    metadata: dict = field(default_factory=dict)


def anomaly_score(params: model.ModelParameters, batch) -> np.ndarray:
    """Per-sample mean squared reconstruction error, inference mode."""
    data = batch.data if isinstance(batch, ImageBatch) else batch
    recon = model.reconstruct(params, data, training_mode=False)
    return losses.positive_loss(recon, data).per_sample.numpy()


def normalize_scores(raw_errors) -> np.ndarray:
    """Min-max scale to [0, 1] over the evaluated set; all-equal input
    maps to all-zero."""
    errors = np.asarray(raw_errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("empty score list")
    if not np.isfinite(errors).all():
        raise ValueError("raw errors contain non-finite values")
    lo = errors.min()
    hi = errors.max()
    if hi == lo:
        return np.zeros_like(errors)
    return (errors - lo) / (hi - lo)


def _split_scores(records: Sequence[ScoreRecord]) -> tuple[np.ndarray, np.ndarray]:
    normal = np.array([r.score for r in records if r.label == Label.NORMAL])
    abnormal = np.array([r.score for r in records if r.label == Label.ABNORMAL])
    if normal.size == 0 or abnormal.size == 0:
        raise SingleClassError("records must contain both labels")
    return normal, abnormal


def roc_curve(records: Sequence[ScoreRecord]) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) with thresholds swept over the distinct scores
    descending; equal scores share one threshold; endpoints (0,0) and (1,1)
    are always present."""
    normal, abnormal = _split_scores(records)
    points = [(0.0, 0.0, math.inf)]
    for t in np.unique(np.concatenate([normal, abnormal]))[::-1]:
        tpr = float((abnormal >= t).mean())
        fpr = float((normal >= t).mean())
        points.append((fpr, tpr, float(t)))
    return points


def auc(records: Sequence[ScoreRecord]) -> float:
    """Tie-aware rank statistic over all (abnormal, normal) pairs."""
    normal, abnormal = _split_scores(records)
    ranks = rankdata(np.concatenate([abnormal, normal]))
    n_a, n_n = abnormal.size, normal.size
    rank_sum = ranks[:n_a].sum()
    return float((rank_sum - n_a * (n_a + 1) / 2.0) / (n_a * n_n))


def auc_trapezoid(records: Sequence[ScoreRecord]) -> float:
    """Trapezoidal area under the exact ROC curve; cross-checks `auc`."""
    points = roc_curve(records)
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.trapezoid(tpr, fpr))


def score_histogram(
    records: Sequence[ScoreRecord], n_bins: int = DEFAULT_HISTOGRAM_BINS
) -> HistogramPair:
    """Per-label counts on shared equal-width bins over [0, 1]; the last bin
    is right-closed so a score of exactly 1.0 lands in it."""
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    normal = np.histogram(
        [r.score for r in records if r.label == Label.NORMAL], bins=edges
    )[0]
    abnormal = np.histogram(
        [r.score for r in records if r.label == Label.ABNORMAL], bins=edges
    )[0]
    return HistogramPair(bin_edges=edges, normal=normal, abnormal=abnormal)


def separation_gap(records: Sequence[ScoreRecord]) -> float:
    """median(abnormal scores) - median(normal scores); positive means the
    abnormal population sits above the normal one."""
    normal, abnormal = _split_scores(records)
    return float(np.median(abnormal) - np.median(normal))


def score_partition(
    params: model.ModelParameters,
    partition: PreprocessedPartition,
    batch_size: int = 256,
) -> list[ScoreRecord]:
    """Score every sample of a partition; records ordered by source_id."""
    ids: list[int] = []
    labels: list[int] = []
    raw: list[np.ndarray] = []
    for batch in batch_iterator(partition, batch_size):
        ids.extend(batch.source_ids.tolist())
        labels.extend(batch.labels.tolist())
        raw.append(anomaly_score(params, batch))
    raw_errors = np.concatenate(raw)
    scores = normalize_scores(raw_errors)
    records = [
        ScoreRecord(
            source_id=int(i), label=Label(l), raw_error=float(e), score=float(s)
        )
        for i, l, e, s in zip(ids, labels, raw_errors, scores)
    ]
    records.sort(key=lambda r: r.source_id)
    return records


def build_report(
    records: Sequence[ScoreRecord],
    n_bins: int = DEFAULT_HISTOGRAM_BINS,
    metadata: dict | None = None,
) -> EvalReport:
    return EvalReport(
        records=list(records),
        roc_points=roc_curve(records),
        auc=auc(records),
        histograms=score_histogram(records, n_bins),
        metadata=dict(metadata or {}),
    )


def evaluate_partition(
    params: model.ModelParameters,
    partition: PreprocessedPartition,
    batch_size: int = 256,
    n_bins: int = DEFAULT_HISTOGRAM_BINS,
    metadata: dict | None = None,
) -> EvalReport:
    return build_report(score_partition(params, partition, batch_size), n_bins, metadata)


# ---------------------------------------------------------------------------
# Report artifacts: CSVs are the ground truth, plots are optional renders
# ---------------------------------------------------------------------------


def write_scores_csv(records: Sequence[ScoreRecord], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source_id", "label", "raw_error", "score"])
        for r in records:
            writer.writerow([r.source_id, r.label.name.lower(), repr(r.raw_error), repr(r.score)])


def read_scores_csv(path: Union[str, Path]) -> list[ScoreRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                ScoreRecord(
                    source_id=int(row["source_id"]),
                    label=Label[row["label"].upper()],
                    raw_error=float(row["raw_error"]),
                    score=float(row["score"]),
                )
            )
    return records


def write_roc_csv(
    roc_points: Sequence[tuple[float, float, float]], path: Union[str, Path]
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for fpr, tpr, threshold in roc_points:
            writer.writerow([repr(threshold), repr(fpr), repr(tpr)])


def write_summary(report: EvalReport, path: Union[str, Path]) -> None:
    """Plain-text key-value block."""
    n_normal = sum(1 for r in report.records if r.label == Label.NORMAL)
    n_abnormal = len(report.records) - n_normal
    lines = {
        "auc": repr(report.auc),
        "n_normal": n_normal,
        "n_abnormal": n_abnormal,
        "separation_gap": repr(separation_gap(report.records)),
        **{k: v for k, v in sorted(report.metadata.items())},
    }
    Path(path).write_text("".join(f"{k}: {v}\n" for k, v in lines.items()))


def write_plots(report: EvalReport, out_dir: Union[str, Path]) -> list[Path]:
    """Emit ROC and score-distribution images; CSVs remain authoritative."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(5, 5))
    fpr = [p[0] for p in report.roc_points]
    tpr = [p[1] for p in report.roc_points]
    ax.plot(fpr, tpr, marker=".", label=f"AUC = {report.auc:.4f}")
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend()
    path = out_dir / "roc.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    h = report.histograms
    centers = (h.bin_edges[:-1] + h.bin_edges[1:]) / 2
    width = h.bin_edges[1] - h.bin_edges[0]
    ax.bar(centers, h.normal, width=width, alpha=0.6, label="normal", color="tab:blue")
    ax.bar(
        centers, h.abnormal, width=width, alpha=0.6, label="abnormal", color="tab:red"
    )
    ax.set_xlabel("anomaly score")
    ax.set_ylabel("count")
    ax.legend()
    path = out_dir / "score_distribution.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)
    return written
