"""The end-to-end pipeline as plain functions over in-memory objects.

``cli`` wires these to files; the acceptance experiments call them directly.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .clustering import ClusterModel, DatasetSplit, FeatureTable, cluster, split_dataset
from .config import Config
from .numerics import spawn_rngs
from .routing import DownstreamTask, RouteReport, extract_features, knn_accuracy, route
from .sdrnet import FULL, BnStats, NetConfig, SdrNet, bn_calibrate
from .ssl import TrainState, train


def net_config(cfg: Config, input_dim: int, g: int | None = None) -> NetConfig:
    n = cfg.net
    return NetConfig(input_dim, n.L, n.g if g is None else g, n.shared_width, n.individual_width,
                     n.proj_dims, n.pred_dims, n.stem_dim, n.bn_affine, n.head_bn)


def stage_seeds(seed: int) -> dict:
    """Independent integer seeds for every stochastic stage."""
    names = ("base", "cluster", "sdr")
    rngs = spawn_rngs(seed, len(names))
    return {name: int(r.integers(2 ** 63)) for name, r in zip(names, rngs)}


def pretrain_base(cfg: Config, samples: np.ndarray) -> TrainState:
    """Plain SimSiam on the whole dataset with a ``g = 1`` net."""
    tc = cfg.train
    if cfg.base_steps:
        tc = replace(tc, total_steps=cfg.base_steps)
    return train(net_config(cfg, samples.shape[1], g=1), None, samples, tc, stage_seeds(cfg.seed)["base"])


def base_features(net: SdrNet, samples: np.ndarray, batch_size: int = 256) -> tuple[FeatureTable, BnStats]:
    bn = BnStats()
    bn_calibrate(net, FULL, samples, batch_size, bn)
    feats = net.forward(FULL, samples, "eval", bn).backbone
    return FeatureTable.from_raw(feats, np.arange(len(samples))), bn


def cluster_features(cfg: Config, table: FeatureTable) -> tuple[ClusterModel, DatasetSplit]:
    rng = spawn_rngs(stage_seeds(cfg.seed)["cluster"], 1)[0]
    model = cluster(table, cfg.k, cfg.cluster.epochs, rng, cfg.cluster.params)
    return model, split_dataset(model.labels, cfg.k)


def pretrain_sdr(cfg: Config, split: DatasetSplit, samples: np.ndarray) -> TrainState:
    return train(net_config(cfg, samples.shape[1]), split, samples, cfg.train, stage_seeds(cfg.seed)["sdr"])


def baseline_accuracy(net: SdrNet, bn: BnStats, task: DownstreamTask, k: int,
                      weighted: bool = False) -> float:
    return knn_accuracy(task, extract_features(net, FULL, task.train_x, bn),
                        extract_features(net, FULL, task.eval_x, bn), k, weighted)


@dataclass
class PipelineResult:
    base: SdrNet
    base_bn: BnStats
    features: FeatureTable
    clusters: ClusterModel
    split: DatasetSplit
    sdr: SdrNet
    sdr_bn: BnStats
    reports: list
    base_log: list
    sdr_log: list


def run_pipeline(cfg: Config, samples: np.ndarray, tasks: list) -> PipelineResult:
    """pretrain-base, extract-features, cluster, pretrain-sdr and route, in memory."""
    base_state = pretrain_base(cfg, samples)
    table, base_bn = base_features(base_state.net, samples, cfg.bn_batch)
    model, split = cluster_features(cfg, table)
    sdr_state = pretrain_sdr(cfg, split, samples)
    bn = BnStats()
    reports = []
    for task in tasks:
        base_acc = baseline_accuracy(base_state.net, base_bn, task, cfg.knn_k, cfg.knn_weighted)
        reports.append(route(sdr_state.net, bn, split, samples, task, cfg.knn_k, cfg.seed,
                             cfg.bn_batch, baseline=base_acc, weighted=cfg.knn_weighted))
    return PipelineResult(base_state.net, base_bn, table, model, split, sdr_state.net, bn, reports,
                          base_state.log, sdr_state.log)


def matching_paths(labels: np.ndarray, truth: np.ndarray, n_truth: int) -> list[int]:
    """For every ground-truth group, the path whose cluster holds most of its samples."""
    k = int(labels.max()) + 1
    return [int(np.bincount(labels[truth == c], minlength=k).argmax()) for c in range(n_truth)]


def path_accuracy_spread(reports: list[RouteReport]) -> float:
    """Mean over tasks of the std (across paths) of kNN accuracy."""
    return float(np.mean([np.std(r.path_accuracies) for r in reports]))
