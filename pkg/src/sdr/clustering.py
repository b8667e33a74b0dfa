"""Balanced clustering of frozen features with entropic optimal transport.

Soft assignments ``U`` maximise ``Tr(U^T S) + eps * H(U)`` over the
transportation polytope (rows sum to 1/n, columns to 1/k) and are solved by
log-domain Sinkhorn-Knopp.  Centroids are fitted by SGD on the cross entropy
between ``n * U`` and ``softmax(S / T)``.  Final labels are the row argmax of
``S = F C^T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .io import atomic_write
from .numerics import EPS, SgdState, ShapeError, l2_normalize, sgd_step


class InvalidConfigError(ValueError):
    pass


class EmptyClusterError(RuntimeError):
    pass


class ZeroFeatureError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterConfig:
    epsilon: float = 0.05
    sinkhorn_iters: int = 200
    sinkhorn_tol: float = 1e-6
    temperature: float = 0.1
    lr: float = 0.5
    momentum: float = 0.9
    centroid_steps: int = 5


@dataclass
class FeatureTable:
    features: np.ndarray
    sample_ids: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.features.ndim != 2 or len(self.sample_ids) != len(self.features):
            raise ShapeError("features must be n x d with n sample ids")
        norms = np.linalg.norm(self.features, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("feature rows must be l2-normalized")

    @classmethod
    def from_raw(cls, features, sample_ids=None):
        features = np.asarray(features, dtype=np.float64)
        if sample_ids is None:
            sample_ids = np.arange(len(features))
        zero = np.flatnonzero(np.linalg.norm(features, axis=1) < EPS) if features.ndim == 2 else []
        if len(zero):
            raise ZeroFeatureError(
                f"{len(zero)} samples (first id {np.asarray(sample_ids)[zero[0]]}) have all-zero features"
                " and cannot be normalized; the feature extractor has dead units for them")
        return cls(l2_normalize(features), sample_ids)

    def __len__(self):
        return len(self.features)


@dataclass(frozen=True)
class SinkhornResult:
    plan: np.ndarray
    error: float
    iterations: int
    converged: bool


@dataclass
class ClusterModel:
    centroids: np.ndarray
    epsilon: float
    assignment: np.ndarray
    labels: np.ndarray
    history: list


@dataclass(frozen=True)
class DatasetSplit:
    subsets: tuple  # D_1..D_k as index arrays
    n: int

    @property
    def k(self):
        return len(self.subsets)

    def subset(self, i: int) -> np.ndarray:
        """``D_i``; ``i = 0`` is the whole dataset."""
        if i == 0:
            return np.arange(self.n)
        return self.subsets[i - 1]


def score_matrix(features, centroids) -> np.ndarray:
    f = features.features if isinstance(features, FeatureTable) else np.asarray(features)
    c = np.asarray(centroids, dtype=np.float64)
    if f.shape[1] != c.shape[1]:
        raise ShapeError(f"feature dim {f.shape[1]} != centroid dim {c.shape[1]}")
    return f @ c.T


def transport_objective(plan, scores, epsilon) -> float:
    """``Tr(U^T S) + eps * H(U)`` with ``H(U) = -sum U log U`` (0 log 0 = 0)."""
    plan = np.asarray(plan)
    positive = plan > 0
    entropy = -np.sum(plan[positive] * np.log(plan[positive]))
    return float(np.sum(plan * scores) + epsilon * entropy)


def sinkhorn(scores, epsilon: float = 0.05, max_iters: int = 200, tol: float = 1e-6) -> SinkhornResult:
    scores = np.asarray(scores, dtype=np.float64)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n, k = scores.shape
    log_kernel = scores / epsilon
    # row-max subtraction keeps exp() bounded; it is absorbed by the row scaling
    log_kernel = log_kernel - log_kernel.max(axis=1, keepdims=True)
    if not log_kernel.any():
        # row-constant scores: entropy alone decides and the plan is exactly uniform
        return SinkhornResult(np.full((n, k), 1.0 / (n * k)), 0.0, 0, True)
    log_r = np.full(n, -np.log(n))
    log_c = np.full(k, -np.log(k))
    log_u, log_v, err, iters = _kernels.sinkhorn_log(log_kernel, log_r, log_c, max_iters, tol)
    plan = np.exp(log_u[:, None] + log_kernel + log_v[None, :])
    return SinkhornResult(plan, float(err), int(iters), bool(err <= tol))


def centroid_loss(features, plan, centroids, temperature: float):
    """Mean cross entropy between ``n * U`` rows and ``softmax(F C^T / T)``.

    Returns ``(loss, grad_wrt_centroids)``.
    """
    f = np.asarray(features)
    n = f.shape[0]
    logits = (f @ centroids.T) / temperature
    logits = logits - logits.max(axis=1, keepdims=True)
    log_p = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    target = n * plan
    loss = -float(np.sum(target * log_p)) / n
    p = np.exp(log_p)
    d_logits = (p * target.sum(axis=1, keepdims=True) - target) / n
    grad = (d_logits / temperature).T @ f
    return loss, grad


def centroid_step(features, plan, centroids, state: SgdState, temperature: float = 0.1) -> np.ndarray:
    """One SGD step on the centroid cross entropy; rows re-normalised after."""
    f = features.features if isinstance(features, FeatureTable) else np.asarray(features)
    if plan.shape != (f.shape[0], centroids.shape[0]) or centroids.shape[1] != f.shape[1]:
        raise ShapeError("features, plan and centroids disagree")
    params = {"C": np.array(centroids, dtype=np.float64)}
    _, grad = centroid_loss(f, plan, params["C"], temperature)
    sgd_step(params, {"C": grad}, state)
    if state.learning_rate == 0:
        return params["C"]
    return l2_normalize(params["C"])


def cluster(features: FeatureTable, k: int, epochs: int, rng: np.random.Generator,
            config: ClusterConfig = ClusterConfig()) -> ClusterModel:
    n = len(features)
    if k < 1 or k > n:
        raise InvalidConfigError(f"need 1 <= k <= n, got k={k}, n={n}")
    f = features.features
    if k == 1:
        return ClusterModel(f[:1].copy(), config.epsilon, np.full((n, 1), 1.0 / n),
                            np.zeros(n, dtype=np.int64), [])
    init = rng.choice(n, size=k, replace=False)
    centroids = f[np.sort(init)].copy()
    state = SgdState(config.lr, config.momentum)
    history = []
    plan = None
    for _ in range(epochs):
        result = sinkhorn(f @ centroids.T, config.epsilon, config.sinkhorn_iters, config.sinkhorn_tol)
        plan = result.plan
        for _ in range(config.centroid_steps):
            centroids = centroid_step(f, plan, centroids, state, config.temperature)
        history.append(result.error)
    scores = f @ centroids.T
    if plan is None:
        plan = sinkhorn(scores, config.epsilon, config.sinkhorn_iters, config.sinkhorn_tol).plan
    labels = np.argmax(scores, axis=1).astype(np.int64)
    return ClusterModel(centroids, config.epsilon, plan, labels, history)


def split_dataset(labels, k: int) -> DatasetSplit:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    subsets = tuple(np.flatnonzero(labels == j) for j in range(k))
    empty = [j for j, s in enumerate(subsets) if len(s) == 0]
    if empty:
        raise EmptyClusterError(
            f"clusters {empty} are empty; re-run clustering with a different seed or a smaller k"
        )
    return DatasetSplit(subsets, len(labels))


def write_split(path, split: DatasetSplit, sample_ids=None) -> None:
    """One line per sample: ``sample_id<TAB>cluster_index`` (0-based cluster)."""
    labels = np.empty(split.n, dtype=np.int64)
    for j, idx in enumerate(split.subsets):
        labels[idx] = j
    ids = np.arange(split.n) if sample_ids is None else np.asarray(sample_ids)
    text = "".join(f"{int(i)}\t{int(c)}\n" for i, c in zip(ids, labels))
    atomic_write(path, text.encode("utf-8"))


def read_split(path, k: int | None = None) -> tuple[DatasetSplit, np.ndarray]:
    ids, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'sample_id<TAB>cluster_index'")
            ids.append(int(parts[0]))
            labels.append(int(parts[1]))
    labels = np.asarray(labels, dtype=np.int64)
    if k is None:
        k = int(labels.max()) + 1
    return split_dataset(labels, k), np.asarray(ids, dtype=np.int64)
