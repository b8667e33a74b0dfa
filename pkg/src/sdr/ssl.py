"""Self-supervised pre-training of the super-net and its sub-nets.

The full net is trained with the symmetrised SimSiam loss on the whole
dataset.  A sub-net is trained on its own cluster with SimSiam plus a
distillation term that pulls its predictions towards the (detached)
projections of the full net.  Sub-nets enter the sampling pool block by
block from the last block backwards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .clustering import DatasetSplit, InvalidConfigError
from .io import atomic_write
from .numerics import SgdState, l2_normalize, neg_cosine_rows, sgd_step, spawn_rngs
from .sdrnet import FULL, NetConfig, SdrNet, Target, all_paths, path_decode, path_index


class ContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.6
    mask_prob: float = 0.1
    scale_jitter: float = 0.2

    def __post_init__(self):
        if self.noise_sigma < 0 or self.scale_jitter < 0 or not 0 <= self.mask_prob < 1:
            raise ValueError(f"invalid augmentation settings {self}")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 4000
    steps_per_phase: tuple | None = None
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_norm_bias: bool = True  # False exempts biases and BN scale/shift from weight decay
    freeze_backbone_shift: bool = True  # last block's BN shift stays 0 so no backbone unit dies
    kd_weight: float = 1.0
    kd_kind: str = "siamkd"
    cosine: bool = False
    augment: AugmentConfig = AugmentConfig()

    def __post_init__(self):
        if self.kd_kind not in ("siamkd", "l2"):
            raise ValueError(f"kd_kind must be 'siamkd' or 'l2', got {self.kd_kind!r}")


def augment(x: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig):
    """Two views of ``x`` (a sample or a batch of rows).

    Each view: coordinates dropped with probability ``mask_prob``, Gaussian
    noise added, the result scaled by ``U(1 - jitter, 1 + jitter)`` per sample.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    views = []
    for _ in range(2):
        v = batch
        if cfg.mask_prob > 0:
            v = v * (rng.random(batch.shape) >= cfg.mask_prob)
        if cfg.noise_sigma > 0:
            v = v + cfg.noise_sigma * rng.standard_normal(batch.shape)
        if cfg.scale_jitter > 0:
            v = v * rng.uniform(1 - cfg.scale_jitter, 1 + cfg.scale_jitter, size=(len(batch), 1))
        views.append(v[0] if single else v)
    return views[0], views[1]


# ------------------------------------------------------------------ losses --

def simsiam_loss(z1, z2, p1, p2):
    """``0.5 * [D(p1, sg(z2)) + D(p2, sg(z1))]`` averaged over rows.

    Returns ``(loss, grads)`` with ``grads`` keyed ``p1, p2, z1, z2``; the
    ``z`` entries are zero because both projections only appear detached.
    """
    l1, g1 = neg_cosine_rows(p1, z2)
    l2, g2 = neg_cosine_rows(p2, z1)
    grads = {"p1": 0.5 * g1, "p2": 0.5 * g2, "z1": np.zeros_like(z1), "z2": np.zeros_like(z2)}
    return 0.5 * (l1 + l2), grads


def siamkd_loss(p_sub1, p_sub2, z_sup1, z_sup2):
    """Sub-net predictions against detached super-net projections of the other view."""
    l1, g1 = neg_cosine_rows(p_sub2, z_sup1)
    l2, g2 = neg_cosine_rows(p_sub1, z_sup2)
    return 0.5 * (l1 + l2), {"p1": 0.5 * g2, "p2": 0.5 * g1}


def l2_distill_loss(z_sub1, z_sub2, z_sup1, z_sup2):
    """Mean squared error between sub and detached super projections, per view."""
    m, d = z_sub1.shape
    e1 = z_sub1 - z_sup1
    e2 = z_sub2 - z_sup2
    loss = 0.5 * (np.sum(e1 * e1) + np.sum(e2 * e2)) / (m * d)
    return float(loss), {"z1": e1 / (m * d), "z2": e2 / (m * d)}


def collapse_metric(features) -> float:
    """Mean per-dimension std of row-normalised features (~1/sqrt(d) healthy, 0 collapsed)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError("collapse_metric needs at least 2 rows")
    return float(l2_normalize(f).std(axis=0).mean())


# ---------------------------------------------------------------- schedule --

def phase_space(p: int, g: int, L: int) -> list[Target]:
    """Targets trainable in phase ``p``: the full net, then paths whose first
    ``L - p`` digits are zero (they differ only in the last ``p`` blocks)."""
    if not 0 <= p <= L:
        raise ValueError(f"phase {p} outside [0, {L}]")
    if p == 0:
        return [FULL]
    return [FULL] + [path_decode(i, g, L) for i in range(g ** p)]


def default_phase_steps(total: int, L: int) -> tuple:
    """30% of the budget on the full net alone, the rest split evenly over phases 1..L."""
    first = int(round(0.3 * total))
    rest = total - first
    share, extra = divmod(rest, L)
    return (first,) + tuple(share + (1 if i >= L - extra else 0) for i in range(L))


NO_DECAY = (".b", ".scale", ".shift")


@dataclass
class TrainState:
    net: SdrNet
    optimizer: SgdState
    rng: np.random.Generator
    config: TrainConfig
    phase: int = 0
    step: int = 0
    log: list = field(default_factory=list)


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if not cfg.cosine or total <= 1:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


def step_loss(net: SdrNet, target: Target, x1, x2, cfg: TrainConfig, detached: dict | None = None):
    """Loss and gradients of one step on already-augmented views.

    Full net: symmetrised SimSiam.  Sub-net: SimSiam + kd_weight * distillation
    against the full net evaluated on the same views with gradients discarded.
    ``detached`` overrides the stop-gradient operands (own projections ``z1``,
    ``z2`` and super-net projections ``sup1``, ``sup2``); finite-difference
    checks pass the values of the unperturbed point here.

    Returns ``(loss, kd, grads, backbone_of_view1, detached)``.
    """
    a = net.forward(target, x1, "train")
    b = net.forward(target, x2, "train")
    det = {"z1": a.z, "z2": b.z} if detached is None else dict(detached)
    loss, g = simsiam_loss(det["z1"], det["z2"], a.p, b.p)
    dp1, dp2 = g["p1"], g["p2"]
    dz1, dz2 = None, None
    kd = 0.0
    if target != FULL and cfg.kd_weight:
        if "sup1" not in det:
            det["sup1"] = net.forward(FULL, x1, "train").z
            det["sup2"] = net.forward(FULL, x2, "train").z
        lam = cfg.kd_weight
        if cfg.kd_kind == "siamkd":
            kd, gk = siamkd_loss(a.p, b.p, det["sup1"], det["sup2"])
            dp1 = dp1 + lam * gk["p1"]
            dp2 = dp2 + lam * gk["p2"]
        else:
            kd, gk = l2_distill_loss(a.z, b.z, det["sup1"], det["sup2"])
            dz1, dz2 = lam * gk["z1"], lam * gk["z2"]
        loss += lam * kd
    grads = net.backward(a.cache, dp=dp1, dz=dz1)
    for name, gv in net.backward(b.cache, dp=dp2, dz=dz2).items():
        grads[name] += gv
    return loss, kd, grads, a.backbone, det


def train_step(state: TrainState, target: Target, batch, source: int | None = None,
               total_steps: int | None = None) -> dict:
    """Augment ``batch``, compute the loss for ``target`` and update its view only."""
    net = state.net
    if source is not None:
        expected = 0 if target == FULL else path_index(target, net.config.g) + 1
        if source != expected:
            raise ContractError(f"batch drawn from D_{source}, target needs D_{expected}")
    x1, x2 = augment(batch, state.rng, state.config.augment)
    loss, kd, grads, feats, _ = step_loss(net, target, x1, x2, state.config)
    if state.config.freeze_backbone_shift:
        last = f"block{net.config.L - 1}.bn."
        grads = {k: v for k, v in grads.items() if not (k.startswith(last) and k.endswith(".shift"))}
    state.optimizer.learning_rate = _lr_at(state.config, state.step, total_steps or 1)
    sgd_step(net.params, grads, state.optimizer)
    net.touch()
    record = {
        "step": state.step,
        "phase": state.phase,
        "target": "full" if target == FULL else str(path_index(target, net.config.g)),
        "loss": loss,
        "kd": kd,
        "collapse": collapse_metric(feats),
    }
    state.step += 1
    state.log.append(record)
    return record


def format_record(r: dict) -> str:
    return (f"step={r['step']} phase={r['phase']} target={r['target']} "
            f"loss={r['loss']:.8g} kd={r['kd']:.8g} collapse={r['collapse']:.8g}")


def write_log(path, records) -> None:
    atomic_write(path, "".join(format_record(r) + "\n" for r in records).encode("utf-8"))


def train(net_config: NetConfig, split: DatasetSplit | None, samples: np.ndarray,
          cfg: TrainConfig, seed: int, net: SdrNet | None = None) -> TrainState:
    """Progressive training of the full net and all ``g^L`` sub-nets.

    ``D_i`` (``i >= 1``) trains the path ``path_decode(i - 1)``.  With
    ``split=None`` only the full net is trained (plain SimSiam).
    """
    g, L = net_config.g, net_config.L
    if split is not None and split.k != g ** L:
        raise InvalidConfigError(f"number of clusters k={split.k} must equal g^L={g ** L}")
    init_rng, data_rng = spawn_rngs(seed, 2)
    if net is None:
        net = SdrNet(net_config, init_rng)
    no_decay = () if cfg.decay_norm_bias else NO_DECAY
    state = TrainState(net, SgdState(cfg.lr, cfg.momentum, cfg.weight_decay, no_decay=no_decay), data_rng, cfg)
    if split is None:
        phases = (cfg.total_steps,)
    else:
        phases = cfg.steps_per_phase or default_phase_steps(cfg.total_steps, L)
        if len(phases) > L + 1:
            raise InvalidConfigError(f"{len(phases)} phases given, at most L+1={L + 1} exist")
    total = int(sum(phases))
    samples = np.asarray(samples, dtype=np.float64)
    for p, n_steps in enumerate(phases):
        state.phase = p
        space = phase_space(p, g, L) if split is not None else [FULL]
        for _ in range(int(n_steps)):
            target = space[int(state.rng.integers(len(space)))]
            source = 0 if target == FULL else path_index(target, g) + 1
            pool = np.arange(len(samples)) if split is None else split.subset(source)
            idx = pool[state.rng.integers(0, len(pool), size=cfg.batch_size)]
            train_step(state, target, samples[idx], source=source, total_steps=total)
    return state


def eval_collapse(net: SdrNet, samples, bn) -> dict:
    """collapse_metric of eval-mode backbone features for the full net and every path."""
    out = {}
    for target in [FULL] + all_paths(net.config.g, net.config.L):
        feats = net.forward(target, samples, "eval", bn).backbone
        key = "full" if target == FULL else str(path_index(target, net.config.g))
        out[key] = collapse_metric(feats)
    return out
