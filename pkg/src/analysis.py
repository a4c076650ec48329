"""Cell clustering with Q, cell-proportion profiles and image-level classifiers."""

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cell_types import CellInstance, ClassifierMode, FeatureMode, instances_to_batch
from .config import ConfigError, NumericError, debug_log
from .metrics import PRF, weighted_prf
from .nn import Discriminator, NetworkSpec, network_dtype

Network = Callable[[Tensor], Tensor]


@dataclass
class CellAssignment:
    """Cluster of one instance; cluster is the lowest index among posterior maxima."""
    instance_id: str
    source_id: str
    cluster: int
    posterior: np.ndarray
    cell_class: Optional[str] = None


def _batched(n: int, batch_size: int) -> List[slice]:
    return [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def _map_batches(fn: Callable[[np.ndarray], np.ndarray], batch: np.ndarray, batch_size: int,
                 threads: int) -> np.ndarray:
    chunks = [batch[s] for s in _batched(len(batch), batch_size)]
    if not chunks:
        raise ValueError("no cell instances to run through the network")
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fn, chunks))
    else:
        results = [fn(chunk) for chunk in chunks]
    return np.concatenate(results, axis=0)


def posteriors(Q: Network, batch: np.ndarray, batch_size: int = 256, threads: int = 1) -> np.ndarray:
    """Q(c|x) for a [-1, 1] NCHW batch."""
    dtype = network_dtype(Q)

    def run(chunk: np.ndarray) -> np.ndarray:
        with ad.no_record():
            return np.asarray(Q(Tensor(chunk.astype(dtype))).values, dtype=np.float64)

    return _map_batches(run, batch, batch_size, threads)


def classify_cells(Q: Network, instances: Sequence[CellInstance], K: int,
                   batch_size: int = 256, threads: int = 1) -> List[CellAssignment]:
    """
    Assign every instance to argmax Q(c|x).

    Raises:
        ConfigError: If Q emits a different number of categories than K
    """
    if not instances:
        return []
    post = posteriors(Q, instances_to_batch(instances), batch_size, threads)
    if post.shape[1] != K:
        raise ConfigError(f"auxiliary network has {post.shape[1]} categories, expected K={K}")
    clusters = np.argmax(post, axis=1)
    return [
        CellAssignment(inst.instance_id, inst.source_id, int(k), row, inst.cell_class)
        for inst, k, row in zip(instances, clusters, post)
    ]


@dataclass
class CellProportionProfile:
    """Per-slide cluster counts X and proportions P."""
    slide_id: str
    counts: np.ndarray
    proportions: np.ndarray
    label: Optional[str] = None

    @property
    def empty(self) -> bool:
        return int(self.counts.sum()) == 0


def cell_proportions(assignments: Sequence[CellAssignment], K: int,
                     slide_ids: Optional[Sequence[str]] = None,
                     labels: Optional[Dict[str, str]] = None) -> List[CellProportionProfile]:
    """
    Count clusters per slide; P_i = X_i / sum X.

    Slides named in ``slide_ids`` without any cell get an all-zero profile
    flagged as empty.
    """
    counts: Dict[str, np.ndarray] = {sid: np.zeros(K, dtype=np.int64) for sid in (slide_ids or [])}
    for a in assignments:
        if not 0 <= a.cluster < K:
            raise ValueError(f"{a.instance_id}: cluster {a.cluster} outside [0, {K})")
        counts.setdefault(a.source_id, np.zeros(K, dtype=np.int64))[a.cluster] += 1
    profiles = []
    for sid in sorted(counts):
        x = counts[sid]
        total = x.sum()
        p = x / total if total > 0 else np.zeros(K)
        profiles.append(CellProportionProfile(sid, x, p, (labels or {}).get(sid)))
        if total == 0:
            debug_log(f"slide {sid} has no cells; excluded from classifier training")
    return profiles


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    objective_history: List[float]

    @property
    def objective(self) -> float:
        return self.objective_history[-1]

    @property
    def iterations(self) -> int:
        return len(self.objective_history)


def _sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new center drawn with probability proportional to D^2."""
    n = len(points)
    centers = [points[rng.integers(n)]]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(points[idx])
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=np.float64)


def kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator, max_iters: int = 100) -> KMeansResult:
    """
    k-means++ seeding followed by Lloyd iterations until the assignment is stable.

    An emptied cluster keeps its previous center.

    Raises:
        ValueError: If k exceeds the number of distinct points
        NumericError: If the objective ever increases
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"kmeans_pp: expected a 2-D point array, got shape {points.shape}")
    distinct = len(np.unique(points, axis=0))
    if k < 1 or k > distinct:
        raise ValueError(f"kmeans_pp: k={k} but only {distinct} distinct points")
    centers = kmeans_pp_init(points, k, rng)
    labels: Optional[np.ndarray] = None
    history: List[float] = []
    for _ in range(max_iters):
        dist = _sq_distances(points, centers)
        new_labels = np.argmin(dist, axis=1)
        objective = float(dist[np.arange(len(points)), new_labels].sum())
        if history and objective > history[-1] * (1 + 1e-12) + 1e-12:
            raise NumericError(f"k-means objective increased from {history[-1]} to {objective}")
        history.append(objective)
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        for j in range(k):
            members = points[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return KMeansResult(centers, labels, history)


def kmeans_objective(points: np.ndarray, centers: np.ndarray) -> float:
    return float(_sq_distances(np.asarray(points, dtype=np.float64), centers).min(axis=1).sum())


def _majority(values: Sequence[Hashable]) -> Hashable:
    counts = Counter(values)
    best = max(counts.values())
    return min((v for v in counts if counts[v] == best), key=str)


class KMeansImageClassifier:
    """Centers fit on training profiles; each cluster predicts its majority training label."""

    def __init__(self, k: int = 2, max_iters: int = 100):
        self.k = k
        self.max_iters = max_iters
        self.centers: Optional[np.ndarray] = None
        self.cluster_labels: Dict[int, Hashable] = {}

    def fit(self, features: np.ndarray, labels: Sequence[Hashable], rng: np.random.Generator) -> "KMeansImageClassifier":
        features = np.asarray(features, dtype=np.float64)
        result = kmeans_pp(features, self.k, rng, self.max_iters)
        self.centers = result.centers
        fallback = _majority(labels)
        labels = list(labels)
        for j in range(self.k):
            members = [labels[i] for i in np.flatnonzero(result.labels == j)]
            self.cluster_labels[j] = _majority(members) if members else fallback
        return self

    def predict(self, features: np.ndarray) -> List[Hashable]:
        if self.centers is None:
            raise RuntimeError("classifier is not fitted")
        nearest = np.argmin(_sq_distances(np.atleast_2d(np.asarray(features, dtype=np.float64)), self.centers), axis=1)
        return [self.cluster_labels[int(j)] for j in nearest]


@dataclass
class LinearClassifierModel:
    """Binary squared-hinge SVM: predict classes[1] when w.x + b > 0."""
    weights: np.ndarray
    bias: float
    regularization: float
    classes: Tuple[Hashable, Hashable] = (0, 1)

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        return np.atleast_2d(np.asarray(features, dtype=np.float64)) @ self.weights + self.bias


def svm_objective(model: LinearClassifierModel, features: np.ndarray, signs: np.ndarray) -> Tuple[float, float]:
    """(total objective, squared-hinge part) for +/-1 targets."""
    margins = np.maximum(0.0, 1.0 - signs * model.decision_function(features))
    hinge = float((margins ** 2).sum())
    return 0.5 * float(model.weights @ model.weights) + model.regularization * hinge, hinge


def linear_svm_train(features: np.ndarray, labels: Sequence[Hashable], C: float = 1.0,
                     epochs: int = 2000) -> LinearClassifierModel:
    """
    Minimize 0.5 ||w||^2 + C sum max(0, 1 - y (w.x + b))^2 by full-batch gradient descent.

    The step is 1 / L with L = 1 + 2C sigma_max([X, 1])^2; the bias is not
    regularized. Labels may be any two values; the larger sorts to +1.

    Raises:
        ValueError: If fewer or more than two classes are present, or features are not finite
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = list(labels)
    if not np.all(np.isfinite(X)):
        raise ValueError("linear_svm_train: features must be finite")
    classes = sorted(set(labels), key=str)
    if len(classes) != 2:
        raise ValueError(f"linear_svm_train: need exactly two classes, got {len(classes)}")
    y = np.array([1.0 if v == classes[1] else -1.0 for v in labels])
    augmented = np.hstack([X, np.ones((len(X), 1))])
    step = 1.0 / (1.0 + 2.0 * C * np.linalg.norm(augmented, 2) ** 2)
    w = np.zeros(X.shape[1])
    b = 0.0
    for _ in range(epochs):
        active = np.maximum(0.0, 1.0 - y * (X @ w + b))
        coef = 2.0 * C * active * y
        w = w - step * (w - X.T @ coef)
        b = b + step * coef.sum()
    model = LinearClassifierModel(w, float(b), C, (classes[0], classes[1]))
    if not np.all(np.isfinite(w)) or not np.isfinite(b):
        raise NumericError("linear SVM diverged")
    return model


def linear_svm_predict(model: LinearClassifierModel, features: np.ndarray) -> List[Hashable]:
    """Label for each feature row: classes[1] when w.x + b > 0, else classes[0]."""
    scores = model.decision_function(features)
    return [model.classes[1] if s > 0 else model.classes[0] for s in scores]


class OneVsRestSVM:
    """Multi-class squared-hinge SVM; prediction is the class with the largest score."""

    def __init__(self, C: float = 1.0, epochs: int = 2000):
        self.C = C
        self.epochs = epochs
        self.classes: List[Hashable] = []
        self.models: List[LinearClassifierModel] = []

    def fit(self, features: np.ndarray, labels: Sequence[Hashable]) -> "OneVsRestSVM":
        labels = list(labels)
        self.classes = sorted(set(labels), key=str)
        if len(self.classes) < 2:
            raise ValueError("one-vs-rest SVM needs at least two classes")
        self.models = [
            linear_svm_train(features, [1 if v == c else 0 for v in labels], self.C, self.epochs)
            for c in self.classes
        ]
        return self

    def predict(self, features: np.ndarray) -> List[Hashable]:
        scores = np.stack([m.decision_function(features) for m in self.models], axis=1)
        return [self.classes[int(i)] for i in np.argmax(scores, axis=1)]


@dataclass
class PCAResult:
    projected: np.ndarray
    components: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray


def pca_project(points: np.ndarray, dims: int = 2) -> PCAResult:
    """
    Project centred data onto the top eigenvectors of its covariance.

    Raises:
        ValueError: If dims exceeds the feature dimension or there are fewer than dims + 1 samples
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"pca_project: expected a 2-D array, got shape {X.shape}")
    n, d = X.shape
    if dims > d:
        raise ValueError(f"pca_project: dims={dims} exceeds feature dimension {d}")
    if n < dims + 1:
        raise ValueError(f"pca_project: need at least {dims + 1} samples, got {n}")
    mean = X.mean(axis=0)
    centred = X - mean
    eigvals, eigvecs = np.linalg.eigh(centred.T @ centred / (n - 1))
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order][:, :dims]
    signs = np.sign(eigvecs[np.argmax(np.abs(eigvecs), axis=0), np.arange(dims)])
    eigvecs = eigvecs * np.where(signs == 0, 1.0, signs)
    total = eigvals.sum()
    ratio = eigvals[:dims] / total if total > 0 else np.zeros(dims)
    return PCAResult(centred @ eigvecs, eigvecs, ratio, mean)


def _pool_grid(size: int, mode: FeatureMode) -> int:
    if mode == FeatureMode.MEANPOOL_FINAL:
        return 1
    grid = 4 if mode == FeatureMode.MAXPOOL4X4 else 2
    return grid if size >= grid and size % grid == 0 else 1


def block_output_shapes(spec: NetworkSpec) -> List[Tuple[int, int]]:
    """(channels, spatial size) after each discriminator block."""
    size, shapes = spec.image_size, []
    for block in spec.blocks:
        if block.kind == "downsample":
            size //= 2
        elif block.kind == "upsample":
            size *= 2
        shapes.append((block.out_channels, size))
    return shapes


def feature_dimension(spec: NetworkSpec, mode: FeatureMode) -> int:
    """Feature length produced by extract_discriminator_features for a spec."""
    return sum(c * _pool_grid(s, mode) ** 2 for c, s in block_output_shapes(spec))


@dataclass
class DiscriminatorFeatures:
    features: np.ndarray
    mode: FeatureMode

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _pool_block(h: Tensor, mode: FeatureMode) -> np.ndarray:
    size = h.shape[2]
    grid = _pool_grid(size, mode)
    act = ad.relu(h)
    if mode == FeatureMode.MAXPOOL4X4:
        pooled = ad.maxpool(act, size // grid)
    else:
        pooled = ad.sum_pool(act, size // grid) * (1.0 / (size // grid) ** 2)
    return pooled.values.reshape(h.shape[0], -1)


def extract_discriminator_features(D: Discriminator, instances: Union[Sequence[CellInstance], np.ndarray],
                                   mode: Union[FeatureMode, str] = FeatureMode.MAXPOOL4X4,
                                   batch_size: int = 128, threads: int = 1) -> DiscriminatorFeatures:
    """
    Pool each residual block's activations and concatenate.

    maxpool4x4 keeps a 4x4 max grid per block, meanpool-block a 2x2 mean
    grid, meanpool-final a global mean; blocks too small for the grid fall
    back to global pooling.
    """
    mode = FeatureMode(mode)
    batch = instances if isinstance(instances, np.ndarray) else instances_to_batch(instances)
    dtype = network_dtype(D)

    def run(chunk: np.ndarray) -> np.ndarray:
        with ad.no_record():
            blocks = D.block_outputs(Tensor(chunk.astype(dtype)))
            return np.concatenate([_pool_block(h, mode) for h in blocks], axis=1).astype(np.float64)

    features = _map_batches(run, batch, batch_size, threads)
    debug_log(f"Extracted {features.shape[1]}-dim {mode.value} features for {len(features)} cells")
    return DiscriminatorFeatures(features, mode)


def stratified_folds(labels: Sequence[Hashable], folds: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Seeded split of sample indices into folds, dealing each class round-robin."""
    labels = list(labels)
    assignment = np.zeros(len(labels), dtype=np.int64)
    offset = 0
    for cls in sorted(set(labels), key=str):
        members = rng.permutation([i for i, v in enumerate(labels) if v == cls])
        assignment[members] = (np.arange(len(members)) + offset) % folds
        offset += len(members)
    return [np.flatnonzero(assignment == f) for f in range(folds)]


@dataclass
class FoldResult:
    repeat: int
    fold: int
    scores: PRF
    predictions: Dict[int, Hashable] = field(default_factory=dict)


def cross_validate(features: np.ndarray, labels: Sequence[Hashable], mode: Union[ClassifierMode, str],
                   folds: int = 4, repeats: int = 1, seed: int = 0, C: float = 1.0,
                   epochs: int = 2000, kmeans_iters: int = 100) -> List[FoldResult]:
    """
    Repeated stratified k-fold evaluation of an image-level classifier.

    Each repeat reshuffles with its own seed; results are reported per fold.
    """
    mode = ClassifierMode(mode)
    X = np.asarray(features, dtype=np.float64)
    labels = list(labels)
    if len(set(labels)) < 2:
        raise ValueError("cross-validation needs at least two image labels")
    results = []
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        for f, test_idx in enumerate(stratified_folds(labels, folds, rng)):
            if len(test_idx) == 0:
                continue
            train_idx = np.setdiff1d(np.arange(len(labels)), test_idx)
            train_labels = [labels[i] for i in train_idx]
            if mode == ClassifierMode.SVM:
                model = linear_svm_train(X[train_idx], train_labels, C, epochs)
                predicted = linear_svm_predict(model, X[test_idx])
            else:
                k = len(set(labels))
                classifier = KMeansImageClassifier(k, kmeans_iters).fit(X[train_idx], train_labels, rng)
                predicted = classifier.predict(X[test_idx])
            truth = [labels[i] for i in test_idx]
            scores = weighted_prf(truth, predicted)
            results.append(FoldResult(r, f, scores, dict(zip(test_idx.tolist(), predicted))))
            debug_log(f"repeat {r} fold {f}: F={scores.fscore:.3f}")
    return results


def summarize_folds(results: Sequence[FoldResult]) -> Dict[str, float]:
    """Mean and standard deviation of each score over folds."""
    out: Dict[str, float] = {}
    for key in PRF._fields:
        values = np.array([getattr(r.scores, key) for r in results])
        out[key] = float(values.mean()) if len(values) else 0.0
        out[f"{key}_std"] = float(values.std()) if len(values) else 0.0
    out["folds"] = len(results)
    return out
