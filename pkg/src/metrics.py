"""Classification, clustering and segmentation-matching metrics."""

from dataclasses import dataclass, field
from typing import Dict, Hashable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np


class PRF(NamedTuple):
    precision: float
    recall: float
    fscore: float


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den > 0)
    return out


def _ordered(values) -> list:
    try:
        return sorted(values)
    except TypeError:
        return sorted(values, key=repr)


def _f_from(precision: np.ndarray, recall: np.ndarray) -> np.ndarray:
    return _safe_ratio(2 * precision * recall, precision + recall)


@dataclass
class ConfusionCounts:
    """Per-class TP/FP/FN; support is TP + FN."""
    classes: List[Hashable]
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def __post_init__(self):
        self.tp = np.asarray(self.tp, dtype=np.int64)
        self.fp = np.asarray(self.fp, dtype=np.int64)
        self.fn = np.asarray(self.fn, dtype=np.int64)

    @property
    def support(self) -> np.ndarray:
        return self.tp + self.fn

    @classmethod
    def from_labels(cls, true: Sequence, pred: Sequence) -> "ConfusionCounts":
        true, pred = list(true), list(pred)
        if len(true) != len(pred):
            raise ValueError(f"label sequences differ in length: {len(true)} vs {len(pred)}")
        if not true:
            raise ValueError("cannot score empty label sequences")
        classes = _ordered(set(true) | set(pred))
        index = {c: i for i, c in enumerate(classes)}
        t = np.array([index[c] for c in true])
        p = np.array([index[c] for c in pred])
        n = len(classes)
        hit = t == p
        tp = np.bincount(t[hit], minlength=n)
        fp = np.bincount(p[~hit], minlength=n)
        fn = np.bincount(t[~hit], minlength=n)
        return cls(classes, tp, fp, fn)

    def per_class(self) -> Dict[Hashable, PRF]:
        precision = _safe_ratio(self.tp, self.tp + self.fp)
        recall = _safe_ratio(self.tp, self.tp + self.fn)
        fscore = _f_from(precision, recall)
        return {c: PRF(float(precision[i]), float(recall[i]), float(fscore[i]))
                for i, c in enumerate(self.classes)}

    def weighted(self) -> PRF:
        """Support-weighted average of per-class precision, recall and F."""
        support = self.support
        total = support.sum()
        if total == 0:
            raise ValueError("no true instances to weight by")
        precision = _safe_ratio(self.tp, self.tp + self.fp)
        recall = _safe_ratio(self.tp, self.tp + self.fn)
        fscore = _f_from(precision, recall)
        w = support / total
        return PRF(float(w @ precision), float(w @ recall), float(w @ fscore))


def weighted_prf(true: Sequence, pred: Sequence) -> PRF:
    """
    Precision, recall and F-score averaged with weights by class support.

    Classes never predicted get precision 0.

    Raises:
        ValueError: On empty or unequal-length inputs
    """
    return ConfusionCounts.from_labels(true, pred).weighted()


@dataclass
class ContingencyTable:
    """n[k][j] = number of items in cluster k with class j."""
    counts: np.ndarray
    clusters: List[Hashable] = field(default_factory=list)
    classes: List[Hashable] = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or np.any(self.counts < 0):
            raise ValueError("contingency table must be a non-negative 2-D count matrix")
        if not self.clusters:
            self.clusters = list(range(self.counts.shape[0]))
        if not self.classes:
            self.classes = list(range(self.counts.shape[1]))

    @property
    def N(self) -> int:
        return int(self.counts.sum())

    @property
    def cluster_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @classmethod
    def from_labels(cls, clusters: Sequence, classes: Sequence,
                    K: Optional[int] = None) -> "ContingencyTable":
        """Build from parallel cluster and class label sequences; K pads integer clusters 0..K-1."""
        clusters, classes = list(clusters), list(classes)
        if len(clusters) != len(classes):
            raise ValueError(f"label sequences differ in length: {len(clusters)} vs {len(classes)}")
        cluster_ids = list(range(K)) if K is not None else _ordered(set(clusters))
        class_ids = _ordered(set(classes))
        ci = {c: i for i, c in enumerate(cluster_ids)}
        cj = {c: j for j, c in enumerate(class_ids)}
        counts = np.zeros((len(cluster_ids), len(class_ids)), dtype=np.int64)
        for k, j in zip(clusters, classes):
            if k not in ci:
                raise ValueError(f"cluster {k!r} outside 0..{K - 1}")
            counts[ci[k], cj[j]] += 1
        return cls(counts, cluster_ids, class_ids)


def _require_items(table: ContingencyTable) -> int:
    n = table.N
    if n == 0:
        raise ValueError("contingency table is empty")
    return n


def purity(table: ContingencyTable) -> float:
    """(1/N) sum over clusters of the largest class count."""
    n = _require_items(table)
    if table.counts.shape[1] == 0:
        return 0.0
    return float(table.counts.max(axis=1).sum() / n)


def cluster_entropy(table: ContingencyTable) -> float:
    """-(1/N) sum_k |w_k| ln(|w_k| / N); empty clusters contribute 0."""
    n = _require_items(table)
    sizes = table.cluster_sizes[table.cluster_sizes > 0].astype(np.float64)
    return float(-(sizes * np.log(sizes / n)).sum() / n)


def conditional_entropy(table: ContingencyTable) -> float:
    """H(class | cluster) in nats: size-weighted class entropy inside each cluster."""
    n = _require_items(table)
    total = 0.0
    for row in table.counts:
        size = row.sum()
        if size == 0:
            continue
        p = row[row > 0] / size
        total += size / n * float(-(p * np.log(p)).sum())
    return total


def cluster_class_mapping(table: ContingencyTable) -> Dict[int, int]:
    """Map each non-empty cluster row to its majority class column (lowest on ties)."""
    return {k: int(np.argmax(row)) for k, row in enumerate(table.counts) if row.sum() > 0}


def cluster_fscore(table: ContingencyTable) -> float:
    """Weighted F after assigning every cluster to its majority class."""
    _require_items(table)
    J = table.counts.shape[1]
    tp = np.zeros(J, dtype=np.int64)
    predicted = np.zeros(J, dtype=np.int64)
    for k, j in cluster_class_mapping(table).items():
        tp[j] += table.counts[k, j]
        predicted[j] += table.counts[k].sum()
    support = table.counts.sum(axis=0)
    counts = ConfusionCounts(list(table.classes), tp, predicted - tp, support - tp)
    return counts.weighted().fscore


@dataclass
class SegMatch:
    """Greedy one-to-one matching of predicted to ground-truth instances."""
    pairs: List[Tuple[int, int, float]]
    unmatched_pred: List[int]
    unmatched_truth: List[int]


@dataclass
class SegMatchReport:
    match: SegMatch
    tp: int
    fp: int
    fn: int
    iou_sum: float
    n_pred: int
    n_truth: int

    @property
    def pixel(self) -> PRF:
        precision = float(_safe_ratio(self.tp, self.tp + self.fp))
        recall = float(_safe_ratio(self.tp, self.tp + self.fn))
        return PRF(precision, recall, float(_f_from(np.float64(precision), np.float64(recall))))

    @property
    def fscore(self) -> float:
        return self.pixel.fscore

    @property
    def mean_iou(self) -> float:
        return self.iou_sum / len(self.match.pairs) if self.match.pairs else 0.0

    @property
    def objects(self) -> PRF:
        matched = len(self.match.pairs)
        precision = float(_safe_ratio(matched, self.n_pred))
        recall = float(_safe_ratio(matched, self.n_truth))
        return PRF(precision, recall, float(_f_from(np.float64(precision), np.float64(recall))))

    def to_dict(self) -> Dict:
        pixel, objects = self.pixel, self.objects
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": pixel.precision, "recall": pixel.recall, "fscore": pixel.fscore,
            "mean_iou": self.mean_iou,
            "matched": len(self.match.pairs), "n_pred": self.n_pred, "n_truth": self.n_truth,
            "object_precision": objects.precision, "object_recall": objects.recall,
            "object_fscore": objects.fscore,
        }


def iou_match(pred: np.ndarray, truth: np.ndarray) -> SegMatchReport:
    """
    Match instances when |I and G| > 0.5 |G|, greedily by descending overlap.

    Matched pairs contribute their overlap as TP and the remainders as FP/FN;
    unmatched instances count wholly as FP (predicted) or FN (truth).

    Raises:
        ValueError: If the label images differ in shape
    """
    pred = np.asarray(pred).astype(np.int64)
    truth = np.asarray(truth).astype(np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"label images differ in shape: {pred.shape} vs {truth.shape}")
    n_p, n_t = int(pred.max(initial=0)) + 1, int(truth.max(initial=0)) + 1
    overlap = np.bincount((pred * n_t + truth).ravel(), minlength=n_p * n_t).reshape(n_p, n_t)
    area_pred = overlap.sum(axis=1)
    area_truth = overlap.sum(axis=0)

    inner = overlap[1:, 1:]
    rows, cols = np.nonzero(inner > 0.5 * area_truth[1:][None, :])
    candidates = sorted(
        ((int(inner[r, c]), r + 1, c + 1) for r, c in zip(rows, cols)),
        key=lambda item: (-item[0], item[1], item[2]),
    )
    used_pred, used_truth = set(), set()
    pairs: List[Tuple[int, int, float]] = []
    tp, iou_sum = 0, 0.0
    for inter, i, j in candidates:
        if i in used_pred or j in used_truth:
            continue
        used_pred.add(i)
        used_truth.add(j)
        pairs.append((i, j, inter / area_truth[j]))
        tp += inter
        iou_sum += inter / (area_pred[i] + area_truth[j] - inter)

    pred_ids = [i for i in range(1, n_p) if area_pred[i] > 0]
    truth_ids = [j for j in range(1, n_t) if area_truth[j] > 0]
    match = SegMatch(
        pairs=pairs,
        unmatched_pred=[i for i in pred_ids if i not in used_pred],
        unmatched_truth=[j for j in truth_ids if j not in used_truth],
    )
    fg_pred = int(area_pred[1:].sum())
    fg_truth = int(area_truth[1:].sum())
    return SegMatchReport(match, tp, fg_pred - tp, fg_truth - tp, iou_sum, len(pred_ids), len(truth_ids))


def aggregate_seg_reports(reports: Sequence[SegMatchReport]) -> Dict:
    """Pool pixel counts, matched pairs and object counts over many images."""
    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    pairs = [p for r in reports for p in r.match.pairs]
    pooled = SegMatchReport(
        SegMatch(pairs, [], []), tp, fp, fn,
        iou_sum=sum(r.iou_sum for r in reports),
        n_pred=sum(r.n_pred for r in reports),
        n_truth=sum(r.n_truth for r in reports),
    )
    summary = pooled.to_dict()
    summary["images"] = len(reports)
    return summary


def clustering_summary(table: ContingencyTable) -> Dict[str, float]:
    return {
        "purity": purity(table),
        "entropy": cluster_entropy(table),
        "conditional_entropy": conditional_entropy(table),
        "fscore": cluster_fscore(table),
        "N": table.N,
    }
