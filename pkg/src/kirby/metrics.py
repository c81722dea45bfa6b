"""Detection metrics (AUROC, FPR at 95% TPR), the feature-set distance diagnostic and CSV reports.

ID samples are the positive class and higher scores mean more ID throughout.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

REPORT_FIELDS = ("method", "id_dataset", "ood_dataset", "auroc", "fpr95", "n_id", "n_ood", "seed", "config_digest")


@dataclass
class ScoreSet:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        self.id_scores = np.asarray(self.id_scores, dtype=np.float64).ravel()
        self.ood_scores = np.asarray(self.ood_scores, dtype=np.float64).ravel()

    @classmethod
    def from_records(cls, scores, is_id) -> "ScoreSet":
        scores, is_id = np.asarray(scores, dtype=np.float64), np.asarray(is_id, dtype=bool)
        return cls(scores[is_id], scores[~is_id])

    @property
    def n_id(self) -> int:
        return len(self.id_scores)

    @property
    def n_ood(self) -> int:
        return len(self.ood_scores)

    def check(self) -> None:
        if self.n_id == 0 or self.n_ood == 0:
            raise ValueError(f"metrics need both classes, got {self.n_id} ID and {self.n_ood} OOD scores")


def auroc(scores: ScoreSet) -> float:
    """Mann-Whitney U / (n_id * n_ood), ties counted one half."""
    scores.check()
    ranks = rankdata(np.concatenate([scores.id_scores, scores.ood_scores]))
    u = ranks[:scores.n_id].sum() - scores.n_id * (scores.n_id + 1) / 2
    return float(u / (scores.n_id * scores.n_ood))


def fpr_at_95_tpr(scores: ScoreSet, tpr: int = 95) -> float:
    """OOD fraction at or above the largest threshold that keeps >= tpr% of ID scores."""
    scores.check()
    k = (tpr * scores.n_id + 99) // 100  # ceil without float rounding
    threshold = np.sort(scores.id_scores)[::-1][k - 1]
    return float((scores.ood_scores >= threshold).mean())


def _nearest(points: np.ndarray, targets: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        out[s:s + chunk] = cdist(points[s:s + chunk], targets).min(axis=1)
    return out


def hausdorff_diagnostic(reference: np.ndarray, set_a: np.ndarray, set_b: np.ndarray) -> float:
    """sup over reference x of |d(x, set_a) - d(x, set_b)| with Euclidean point-set distance.

    With reference == set_a this is the directed Hausdorff distance from set_a to set_b.
    """
    sets = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in (reference, set_a, set_b)]
    if any(len(s) == 0 for s in sets):
        raise ValueError("all three feature sets must be non-empty")
    if len({s.shape[1] for s in sets}) != 1:
        raise ValueError("feature sets differ in width")
    x, a, b = sets
    return float(np.abs(_nearest(x, a) - _nearest(x, b)).max())


@dataclass
class MetricsReport:
    method: str
    id_dataset: str
    ood_dataset: str
    auroc: float
    fpr95: float
    n_id: int
    n_ood: int
    seed: int | str
    config_digest: str

    @classmethod
    def from_scores(cls, method: str, id_dataset: str, ood_dataset: str, scores: ScoreSet,
                    seed, config_digest: str) -> "MetricsReport":
        return cls(method, id_dataset, ood_dataset, auroc(scores), fpr_at_95_tpr(scores),
                   scores.n_id, scores.n_ood, seed, config_digest)

    def row(self) -> list[str]:
        return [self.method, self.id_dataset, self.ood_dataset, f"{self.auroc:.6f}", f"{self.fpr95:.6f}",
                str(self.n_id), str(self.n_ood), str(self.seed), self.config_digest]


def mean_rows(reports: list[MetricsReport]) -> list[MetricsReport]:
    """One 'mean' row per (method, id set, ood set) averaged over seeds."""
    groups: dict[tuple, list[MetricsReport]] = {}
    for r in reports:
        groups.setdefault((r.method, r.id_dataset, r.ood_dataset), []).append(r)
    out = []
    for (method, id_ds, ood_ds), rows in groups.items():
        out.append(MetricsReport(method, id_ds, ood_ds, float(np.mean([r.auroc for r in rows])),
                                 float(np.mean([r.fpr95 for r in rows])), rows[0].n_id, rows[0].n_ood,
                                 "mean", rows[0].config_digest))
    return out


def format_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_FIELDS)
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def format_table(reports: list[MetricsReport]) -> str:
    header = f"{'method':<12} {'id':<10} {'ood':<10} {'AUROC':>8} {'FPR95':>8} {'seed':>5}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(f"{r.method:<12} {r.id_dataset:<10} {r.ood_dataset:<10} "
                     f"{100 * r.auroc:8.2f} {100 * r.fpr95:8.2f} {str(r.seed):>5}")
    return "\n".join(lines)


def emit_report(reports: list[MetricsReport], path) -> str:
    """Write the CSV and return the console table."""
    path = Path(path)
    try:
        path.write_text(format_csv(reports))
    except OSError as err:
        raise OSError(f"cannot write report to {path}: {err}") from err
    return format_table(reports)


def read_report(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
