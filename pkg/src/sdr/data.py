"""Hierarchical synthetic data standing in for a semantically structured corpus.

Each supercluster ``c`` has a mean ``mu_c`` (norm = ``separation``) and its own
``subspace_dim``-dimensional orthonormal basis ``B_c``; with ``orthogonal`` set
(and enough dimensions) all means and bases are mutually orthogonal.  Samples vary inside
``B_c`` plus isotropic noise, so the fine structure of one supercluster lives
in directions the other superclusters do not use.  Downstream tasks for ``c``
are classification problems whose class means are spread inside ``B_c``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .io import Dataset
from .numerics import make_rng
from .routing import DownstreamTask


@dataclass(frozen=True)
class SyntheticSpec:
    superclusters: int = 4
    subclusters: int = 1
    samples_per_subcluster: int = 500
    dim: int = 32
    separation: float = 4.0
    noise: float = 0.6
    subspace_dim: int = 4
    within_scale: float = 1.0
    sub_spread: float = 1.0
    task_classes: int = 4
    task_train: int = 100
    task_eval: int = 200
    class_spread: float = 1.0
    class_scale: float = 0.5
    normalize: bool = False
    orthogonal: bool = True
    seed: int = 0

    def to_meta(self) -> dict:
        return {f"data.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, values: dict) -> "SyntheticSpec":
        kwargs = {}
        for name, f in cls.__dataclass_fields__.items():
            if name in values:
                raw = values[name]
                if f.type in ("bool", bool):
                    kwargs[name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
                elif f.type in ("int", int):
                    kwargs[name] = int(raw)
                else:
                    kwargs[name] = float(raw)
        return cls(**kwargs)


@dataclass
class SyntheticData:
    train: Dataset  # labels = supercluster id
    subcluster: np.ndarray
    tasks: list
    means: np.ndarray
    bases: np.ndarray


def _orthonormal(rng, d, m):
    q, _ = np.linalg.qr(rng.standard_normal((d, m)))
    return q[:, :m]


def gen_data(spec: SyntheticSpec) -> SyntheticData:
    rng = make_rng(spec.seed)
    d, m = spec.dim, spec.subspace_dim
    k = spec.superclusters
    if spec.orthogonal and k * (m + 1) <= d:
        # mean directions and every B_c occupy mutually orthogonal blocks of one rotation
        q = _orthonormal(rng, d, d)
        means = spec.separation * q[:, :k].T
        bases = np.stack([q[:, k + c * m:k + (c + 1) * m] for c in range(k)])
    else:
        dirs = rng.standard_normal((k, d))
        means = spec.separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        bases = np.stack([_orthonormal(rng, d, m) for _ in range(k)])
    xs, sup, sub = [], [], []
    for c in range(spec.superclusters):
        centres = rng.standard_normal((spec.subclusters, m)) * spec.sub_spread
        if spec.subclusters == 1:
            centres[:] = 0.0
        for s in range(spec.subclusters):
            n = spec.samples_per_subcluster
            coords = centres[s] + spec.within_scale * rng.standard_normal((n, m))
            x = means[c] + coords @ bases[c].T + spec.noise * rng.standard_normal((n, d))
            xs.append(x)
            sup.append(np.full(n, c))
            sub.append(np.full(n, s))
    samples = np.concatenate(xs)
    tasks = []
    for c in range(spec.superclusters):
        anchors = rng.standard_normal((spec.task_classes, m)) * spec.class_spread
        parts = {}
        for split, n in (("train", spec.task_train), ("eval", spec.task_eval)):
            xs_t, ys_t = [], []
            for j in range(spec.task_classes):
                coords = anchors[j] + spec.class_scale * rng.standard_normal((n, m))
                xs_t.append(means[c] + coords @ bases[c].T + spec.noise * rng.standard_normal((n, d)))
                ys_t.append(np.full(n, j))
            parts[split] = (np.concatenate(xs_t), np.concatenate(ys_t))
        tx, ty = parts["train"]
        ex, ey = parts["eval"]
        if spec.normalize:
            tx, ex = _unit(tx), _unit(ex)
        tasks.append(DownstreamTask(f"super{c}", tx, ty, ex, ey))
    if spec.normalize:
        samples = _unit(samples)
    train = Dataset(samples, np.concatenate(sup).astype(np.int64))
    return SyntheticData(train, np.concatenate(sub).astype(np.int64), tasks, means, bases)


def _unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def adjusted_rand_index(a, b) -> float:
    """Adjusted Rand index between two labelings."""
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_cells = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    total = comb2(len(a))
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))
