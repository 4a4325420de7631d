"""Evaluation metrics: Jaccard distance, generalised energy distance, Dice,
CE error maps, normalised cross correlation, S_NCC, paired t-test."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .inference import LOG_GUARD_EPS, SampleSet, gamma_map

NCC_DEGENERATE_STD = 1e-10


@dataclass
class AnnotationSet:
    """Ground-truth masks from M annotators for one case."""

    masks: np.ndarray  # (M, H, W) integer labels
    annotator_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.masks = np.asarray(self.masks)
        if self.masks.ndim != 3 or self.masks.shape[0] < 1:
            raise ValueError("masks must be (M, H, W) with M >= 1")
        if not self.annotator_ids:
            self.annotator_ids = list(range(self.masks.shape[0]))

    @property
    def m(self) -> int:
        return self.masks.shape[0]


def _per_class_iou(a_flat: np.ndarray, b_flat: np.ndarray, classes) -> np.ndarray:
    """IoU matrix (n, m) per class pair; both-empty pairs count as IoU 1."""
    ious = []
    for c in classes:
        ac = (a_flat == c).astype(np.float32)
        bc = (b_flat == c).astype(np.float32)
        inter = ac @ bc.T
        sizes_a = ac.sum(axis=1, keepdims=True)
        sizes_b = bc.sum(axis=1, keepdims=True)
        union = sizes_a + sizes_b.T - inter
        with np.errstate(invalid="ignore"):
            iou = np.where(union > 0, inter / union, 1.0)
        ious.append(iou)
    return np.mean(ious, axis=0)


def _pairwise_distance(a: np.ndarray, b: np.ndarray, classes) -> np.ndarray:
    """1 - mean-over-classes IoU between every mask in a and every mask in b."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"mask shapes differ: {a.shape[1:]} vs {b.shape[1:]}")
    a_flat = a.reshape(a.shape[0], -1)
    b_flat = b.reshape(b.shape[0], -1)
    return 1.0 - _per_class_iou(a_flat, b_flat, classes)


def jaccard_distance(a: np.ndarray, b: np.ndarray, classes) -> float:
    """d = 1 - mean-over-classes IoU; both-empty classes contribute IoU 1."""
    classes = list(classes)
    if not classes:
        raise ValueError("class list must be non-empty")
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return float(_pairwise_distance(a[None], b[None], classes)[0, 0])


def ged_squared(
    ss: SampleSet | np.ndarray,
    ann: AnnotationSet | np.ndarray,
    classes,
    unbiased: bool = False,
) -> float:
    """Plug-in generalised energy distance 2 E[d(s,y)] - E[d(s,s')] - E[d(y,y')].

    By default all index pairs (diagonal included) enter the within-set
    means; unbiased=True excludes the diagonal.  The value is reported
    as-is (the biased estimator can dip slightly negative).
    """
    classes = list(classes)
    if not classes:
        raise ValueError("class list must be non-empty")
    samples = ss.labels if isinstance(ss, SampleSet) else np.asarray(ss)
    masks = ann.masks if isinstance(ann, AnnotationSet) else np.asarray(ann)
    n, m = samples.shape[0], masks.shape[0]
    if n < 1 or m < 1:
        raise ValueError("need at least one sample and one annotation")
    d_sy = _pairwise_distance(samples, masks, classes)
    d_ss = _pairwise_distance(samples, samples, classes)
    d_yy = _pairwise_distance(masks, masks, classes)
    if unbiased:
        if n < 2 or m < 2:
            raise ValueError("unbiased estimator needs at least 2 samples and 2 annotations")
        within_ss = (d_ss.sum() - np.trace(d_ss)) / (n * (n - 1))
        within_yy = (d_yy.sum() - np.trace(d_yy)) / (m * (m - 1))
    else:
        within_ss = d_ss.mean()
        within_yy = d_yy.mean()
    return float(2.0 * d_sy.mean() - within_ss - within_yy)


@dataclass
class DiceResult:
    per_class: dict[int, float]
    mean: float


def dice(pred: np.ndarray, gt: np.ndarray, classes) -> DiceResult:
    """Per-class 2|A&B| / (|A| + |B|); both-empty classes count as 1."""
    classes = list(classes)
    if not classes:
        raise ValueError("class list must be non-empty")
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    per_class = {}
    for c in classes:
        a = pred == c
        b = gt == c
        denom = a.sum() + b.sum()
        per_class[c] = float(2.0 * (a & b).sum() / denom) if denom > 0 else 1.0
    return DiceResult(per_class=per_class, mean=float(np.mean(list(per_class.values()))))


def ce_error_map(ss: SampleSet, y: np.ndarray) -> np.ndarray:
    """Per-pixel mean over samples of -ln p_n(y_i), from soft probabilities."""
    y = np.asarray(y)
    if y.shape != ss.labels.shape[1:]:
        raise ValueError(f"annotation shape {y.shape} != sample grid {ss.labels.shape[1:]}")
    picked = np.take_along_axis(
        ss.probs.astype(np.float64), y[None, :, :, None].astype(np.int64), axis=-1
    )[..., 0]
    return -np.log(picked + LOG_GUARD_EPS).mean(axis=0)


def ncc(map_a: np.ndarray, map_b: np.ndarray) -> float:
    """Normalised cross correlation; 0 if either map is (near-)constant."""
    a = np.asarray(map_a, dtype=np.float64)
    b = np.asarray(map_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
    std_a, std_b = a.std(), b.std()
    if std_a < NCC_DEGENERATE_STD or std_b < NCC_DEGENERATE_STD:
        return 0.0
    return float(((a - a.mean()) * (b - b.mean())).mean() / (std_a * std_b))


def s_ncc(ss: SampleSet, ann: AnnotationSet) -> float:
    """Mean over annotators of NCC(gamma map, per-annotator CE error map)."""
    gamma = gamma_map(ss)
    values = [ncc(gamma, ce_error_map(ss, ann.masks[j])) for j in range(ann.m)]
    return float(np.mean(values))


@dataclass
class TTestResult:
    p_value: float
    zero_variance: bool = False


def paired_ttest(values_a, values_b) -> TTestResult:
    """Two-sided paired t-test; zero-variance differences are flagged with
    the p = 1 (zero mean) / p = 0 (nonzero mean) convention."""
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equal-length paired lists with >= 2 entries")
    diff = a - b
    if np.all(diff == diff[0]):
        return TTestResult(p_value=1.0 if diff[0] == 0.0 else 0.0, zero_variance=True)
    result = stats.ttest_rel(a, b)
    return TTestResult(p_value=float(result.pvalue), zero_variance=False)


@dataclass
class CaseMetrics:
    case_id: str
    ged: float
    sncc: float
    dice: float


@dataclass
class MetricsReport:
    """Per-case and aggregate GED / S_NCC / Dice values for one method."""

    method: str
    dataset_id: str
    n_samples: int
    rows: list[CaseMetrics] = field(default_factory=list)

    @property
    def mean_ged(self) -> float:
        return float(np.mean([r.ged for r in self.rows]))

    @property
    def mean_sncc(self) -> float:
        return float(np.mean([r.sncc for r in self.rows]))

    @property
    def mean_dice(self) -> float:
        return float(np.mean([r.dice for r in self.rows]))

    def write_csv(self, path: Path) -> None:
        lines = ["case_id,ged,sncc,dice"]
        for r in self.rows:
            lines.append(f"{r.case_id},{r.ged!r},{r.sncc!r},{r.dice!r}")
        lines.append(
            f"# aggregate method={self.method} dataset={self.dataset_id} "
            f"n_samples={self.n_samples} cases={len(self.rows)}"
        )
        lines.append(f"mean,{self.mean_ged!r},{self.mean_sncc!r},{self.mean_dice!r}")
        Path(path).write_text("\n".join(lines) + "\n")
