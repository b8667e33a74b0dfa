"""Route a downstream task to the pre-trained sub-net with the best kNN accuracy."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .clustering import DatasetSplit
from .io import Checkpoint
from .numerics import l2_normalize
from .sdrnet import (FULL, BnStats, CalibrationRequired, NetConfig, PathCode, SdrNet, Target,
                     all_paths, bn_calibrate, path_index, target_key)

DEFAULT_KNN_K = 200


@dataclass
class DownstreamTask:
    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray

    def __post_init__(self):
        self.train_y = np.asarray(self.train_y, dtype=np.int64)
        self.eval_y = np.asarray(self.eval_y, dtype=np.int64)
        if not set(np.unique(self.eval_y)) <= set(np.unique(self.train_y)):
            raise ValueError(f"task {self.name}: eval labels not seen in train split")


@dataclass
class RouteEntry:
    index: int | None  # None for the full net
    digits: tuple
    accuracy: float


@dataclass
class RouteReport:
    task: str
    k: int
    seed: int
    entries: list
    best: int | None
    best_accuracy: float
    note: str = ""
    baseline: float | None = None

    @property
    def path_accuracies(self) -> np.ndarray:
        return np.array([e.accuracy for e in self.entries if e.index is not None])

    def best_digits(self):
        for e in self.entries:
            if e.index == self.best:
                return e.digits
        return None

    def to_text(self) -> str:
        lines = [f"task={self.task}", f"k={self.k}", f"seed={self.seed}"]
        if self.baseline is not None:
            lines.append(f"baseline={self.baseline:.10g}")
        if self.note:
            lines.append(f"note={self.note}")
        for e in self.entries:
            idx = "full" if e.index is None else str(e.index)
            digits = "-" if e.index is None else "".join(map(str, e.digits))
            lines.append(f"path={idx} digits={digits} acc={e.accuracy:.10g}")
        best = "full" if self.best is None else str(self.best)
        lines.append(f"best={best} acc={self.best_accuracy:.10g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RouteReport":
        head, entries, best, best_acc = {}, [], None, None
        for line in text.splitlines():
            if line.startswith("path="):
                fields = dict(part.split("=", 1) for part in line.split())
                idx = None if fields["path"] == "full" else int(fields["path"])
                digits = () if idx is None else tuple(int(c) for c in fields["digits"])
                entries.append(RouteEntry(idx, digits, float(fields["acc"])))
            elif line.startswith("best="):
                fields = dict(part.split("=", 1) for part in line.split())
                best = None if fields["best"] == "full" else int(fields["best"])
                best_acc = float(fields["acc"])
            elif "=" in line:
                key, value = line.split("=", 1)
                head[key] = value
        baseline = float(head["baseline"]) if "baseline" in head else None
        return cls(head.get("task", ""), int(head.get("k", 0)), int(head.get("seed", 0)),
                   entries, best, best_acc, head.get("note", ""), baseline)


def extract_features(net: SdrNet, target: Target, samples, bn: BnStats) -> np.ndarray:
    """l2-normalised eval-mode backbone features."""
    if bn is None or target not in bn:
        raise CalibrationRequired(f"no BN statistics for {target_key(target)}; run bn_calibrate first")
    return l2_normalize(net.forward(target, samples, "eval", bn).backbone)


def knn_predict(train_feats, train_labels, query_feats, k: int = DEFAULT_KNN_K,
                weighted: bool = False) -> np.ndarray:
    """Majority vote among the ``min(k, n_train)`` most cosine-similar rows.

    Ties: neighbours by lower training index; votes by larger summed similarity,
    then lower class id.  With ``weighted`` each neighbour votes with its
    similarity instead of 1 (ties to the lower class id).
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if len(train_labels) == 0:
        raise ValueError("empty training set")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(int(k), len(train_labels))
    sim = np.asarray(query_feats) @ np.asarray(train_feats).T
    n_classes = int(train_labels.max()) + 1
    if not weighted:
        return _kernels.knn_vote(sim, train_labels, k, n_classes)
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    sums = np.zeros((sim.shape[0], n_classes))
    rows = np.repeat(np.arange(sim.shape[0]), k)
    np.add.at(sums, (rows, train_labels[order].ravel()), np.take_along_axis(sim, order, axis=1).ravel())
    return np.argmax(sums, axis=1).astype(np.int64)


def knn_accuracy(task: DownstreamTask, feats_train, feats_eval, k: int = DEFAULT_KNN_K,
                 weighted: bool = False) -> float:
    pred = knn_predict(feats_train, task.train_y, feats_eval, k, weighted)
    return float(np.count_nonzero(pred == task.eval_y)) / len(task.eval_y)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SDR_THREADS", "1")))
    except ValueError:
        return 1


def route(net: SdrNet, bn: BnStats, split: DatasetSplit, samples, task: DownstreamTask,
          k: int = DEFAULT_KNN_K, seed: int = 0, batch_size: int = 256,
          baseline: float | None = None, weighted: bool = False) -> RouteReport:
    """kNN-evaluate every path (and the full net) on ``task``; pick the best path.

    Missing BN statistics are calibrated on the target's own subset (``D_i``,
    or ``D_0`` for the full net).  The full net wins only by strictly beating
    every path; ties among paths go to the lowest index.
    """
    g, L = net.config.g, net.config.L
    targets = all_paths(g, L) + [FULL]
    samples = np.asarray(samples, dtype=np.float64)

    def evaluate(target):
        if target not in bn:
            src = 0 if target == FULL else path_index(target, g) + 1
            bn_calibrate(net, target, samples[split.subset(src)], batch_size, bn)
        ftr = extract_features(net, target, task.train_x, bn)
        fev = extract_features(net, target, task.eval_x, bn)
        return knn_accuracy(task, ftr, fev, k, weighted)

    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            accs = list(pool.map(evaluate, targets))
    else:
        accs = [evaluate(t) for t in targets]
    entries = [RouteEntry(path_index(t, g), t.digits, a) for t, a in zip(targets[:-1], accs[:-1])]
    entries.append(RouteEntry(None, (), accs[-1]))
    path_accs = accs[:-1]
    best_path = int(np.argmax(path_accs))
    best, best_acc = best_path, path_accs[best_path]
    note = "lowest index among ties" if path_accs.count(best_acc) > 1 else ""
    if accs[-1] > best_acc:
        best, best_acc = None, accs[-1]
        note = "full net strictly beats every path"
    return RouteReport(task.name, min(k, len(task.train_y)), seed, entries, best, best_acc,
                       note, baseline)


# ----------------------------------------------------------------- export --

def export_subnet(net: SdrNet, path: PathCode, bn: BnStats, meta: dict | None = None) -> Checkpoint:
    """Standalone ``g = 1`` checkpoint holding only ``path``'s weights and BN stats.

    Individual group ``digits[l]`` of block ``l`` is stored as ``ind0``.
    """
    stats = bn.get(path) if bn is not None else None
    if stats is None:
        raise CalibrationRequired(f"no BN statistics for path {path}; calibrate before export")
    c = net.config
    sub_config = NetConfig(c.input_dim, c.L, 1, c.shared_width, c.individual_width, c.proj_dims,
                           c.pred_dims, c.stem_dim, c.bn_affine, c.head_bn)

    def rename(name):
        for l, d in enumerate(path.digits):
            for prefix in (f"block{l}.ind{d}", f"block{l}.bn.ind{d}"):
                if name.startswith(prefix + "."):
                    return prefix[:-len(str(d))] + "0" + name[len(prefix):]
        return name

    tensors = {rename(n): a for n, a in net.subnet_params(path).items()}
    sub_layers = {}
    for layer, ms in stats.items():
        sub_layers[rename(layer + ".")[:-1]] = ms
    sub_bn = BnStats()
    sub_bn.set(PathCode((0,) * c.L), sub_layers)
    m = dict(meta or {})
    m.update(sub_config.to_meta())
    m["export.path"] = str(path)
    m["export.index"] = str(path_index(path, c.g))
    tensors.update(sub_bn.to_tensors())
    return Checkpoint(m, tensors)


def load_subnet(ckpt: Checkpoint) -> tuple[SdrNet, PathCode, BnStats]:
    """Inverse of :func:`export_subnet`: ``(net, target, bn)`` ready for eval forward."""
    net = SdrNet.from_checkpoint(ckpt)
    bn = BnStats.from_tensors(ckpt.tensors)
    return net, PathCode((0,) * net.config.L), bn
