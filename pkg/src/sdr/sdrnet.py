"""Weight-sharing MLP super-network with shared and individual channel groups.

Every block holds one shared group (``shared_width`` channels) and ``g``
individual groups (``individual_width`` channels each).  A path picks one
individual group per block; the sub-net for a path evaluates each block on
``[shared | individual_path[l]]``.  Sub-net parameters are the very arrays of
the full net, so updates through either view are seen by both.

Full-net wiring: individual group ``j`` of block ``l > 0`` reads
``[shared_prev | individual_prev_j]``; the shared group (and the heads) read
``[shared_prev | mean_j individual_prev_j]``.  With ``g = 1`` this is exactly
the single path.

Layer names::

    stem.w stem.b
    block{l}.shared.w|b   block{l}.ind{j}.w|b
    block{l}.bn.shared.scale|shift   block{l}.bn.ind{j}.scale|shift
    proj.{0|1}.w|b   pred.{0|1}.w|b
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from .io import Checkpoint

VAR_FLOOR = 1e-8
FULL = "full"


class CalibrationRequired(RuntimeError):
    """Eval-mode forward asked for a target without BN statistics."""


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    L: int = 2
    g: int = 2
    shared_width: int = 8
    individual_width: int = 8
    proj_dims: tuple = (32, 32)
    pred_dims: tuple = (16, 32)
    stem_dim: int = 0
    bn_affine: bool = True
    head_bn: bool = True

    def __post_init__(self):
        object.__setattr__(self, "proj_dims", tuple(int(v) for v in self.proj_dims))
        object.__setattr__(self, "pred_dims", tuple(int(v) for v in self.pred_dims))
        if self.L < 1 or self.g < 1 or self.shared_width < 0 or self.individual_width < 1:
            raise ValueError(f"invalid block layout in {self}")
        if len(self.proj_dims) not in (0, 2) or len(self.pred_dims) not in (0, 2):
            raise ValueError("heads are either absent or two layers deep")
        if bool(self.proj_dims) != bool(self.pred_dims):
            raise ValueError("projection and prediction heads come together")
        if self.proj_dims and self.pred_dims[-1] != self.proj_dims[-1]:
            raise ValueError("prediction output width must equal projection output width")

    @property
    def n_paths(self) -> int:
        return self.g ** self.L

    @property
    def sub_width(self) -> int:
        return self.shared_width + self.individual_width

    @property
    def block_input(self) -> int:
        return self.stem_dim or self.input_dim

    def to_meta(self) -> dict:
        out = {}
        for key, value in asdict(self).items():
            out[f"net.{key}"] = ",".join(map(str, value)) if isinstance(value, tuple) else str(value)
        return out

    @classmethod
    def from_meta(cls, meta: dict) -> "NetConfig":
        kwargs = {}
        for name, f in cls.__dataclass_fields__.items():
            raw = meta.get(f"net.{name}")
            if raw is None:
                continue
            if name in ("proj_dims", "pred_dims"):
                kwargs[name] = tuple(int(v) for v in raw.split(",") if v)
            elif name in ("bn_affine", "head_bn"):
                kwargs[name] = raw == "True"
            else:
                kwargs[name] = int(raw)
        return cls(**kwargs)


@dataclass(frozen=True)
class PathCode:
    digits: tuple

    def __post_init__(self):
        object.__setattr__(self, "digits", tuple(int(d) for d in self.digits))

    def __str__(self):
        return "".join(map(str, self.digits))


Target = Union[str, PathCode]


def path_index(p: PathCode, g: int) -> int:
    idx = 0
    for d in p.digits:
        if not 0 <= d < g:
            raise ValueError(f"digit {d} outside [0, {g})")
        idx = idx * g + d
    return idx


def path_decode(i: int, g: int, L: int) -> PathCode:
    if not 0 <= i < g ** L:
        raise ValueError(f"path index {i} outside [0, {g ** L})")
    digits = []
    for _ in range(L):
        i, d = divmod(i, g)
        digits.append(d)
    return PathCode(tuple(reversed(digits)))


def all_paths(g: int, L: int) -> list[PathCode]:
    return [path_decode(i, g, L) for i in range(g ** L)]


def target_key(target: Target, g: int | None = None) -> str:
    if target == FULL:
        return FULL
    return "p" + str(target)


def _check_target(config: NetConfig, target: Target) -> None:
    if target == FULL:
        return
    if not isinstance(target, PathCode) or len(target.digits) != config.L:
        raise ValueError(f"target must be 'full' or a length-{config.L} PathCode, got {target!r}")
    path_index(target, config.g)


# ------------------------------------------------------------------ layers --

def _layer_forward(inp, w, b, *, scale=None, shift=None, bn=False, relu=False,
                   train=True, stats=None):
    pre = inp @ w + b
    cache = {"inp": inp, "bn": bn, "relu": relu, "w": w}
    out = pre
    batch_stats = None
    if bn:
        if train:
            mean = pre.mean(axis=0)
            var = pre.var(axis=0)
            batch_stats = (mean, var)
        else:
            mean, var = stats
        floored = var < VAR_FLOOR
        inv = 1.0 / np.sqrt(np.where(floored, VAR_FLOOR, var))
        xhat = (pre - mean) * inv
        cache.update(xhat=xhat, inv=inv, floored=floored, train=train)
        out = xhat
        if scale is not None:
            out = xhat * scale + shift
            cache["scale"] = scale
    if relu:
        cache["active"] = out > 0
        out = np.where(cache["active"], out, 0.0)
    return out, cache, batch_stats


def _layer_backward(dout, cache):
    grads = {}
    d = dout
    if cache["relu"]:
        d = np.where(cache["active"], d, 0.0)
    if cache["bn"]:
        if not cache["train"]:
            raise StaleCacheError("backward needs a train-mode forward cache")
        xhat = cache["xhat"]
        if "scale" in cache:
            grads["scale"] = np.sum(d * xhat, axis=0)
            grads["shift"] = np.sum(d, axis=0)
            d = d * cache["scale"]
        mean_d = d.mean(axis=0)
        mean_dx = np.where(cache["floored"], 0.0, (d * xhat).mean(axis=0))
        d = (d - mean_d - xhat * mean_dx) * cache["inv"]
    grads["w"] = cache["inp"].T @ d
    grads["b"] = d.sum(axis=0)
    return d @ cache["w"].T, grads


# ----------------------------------------------------------------- network --

@dataclass
class ForwardResult:
    backbone: np.ndarray
    z: np.ndarray
    p: np.ndarray
    cache: dict
    bn_batch: dict = field(default_factory=dict)


class SdrNet:
    def __init__(self, config: NetConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self._version = 0
        self._build(rng)

    # layout -------------------------------------------------------------
    def _build(self, rng):
        c = self.config

        def dense(name, fan_in, fan_out):
            bound = np.sqrt(6.0 / fan_in)
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params[f"{name}.w"] = w
            self.params[f"{name}.b"] = np.zeros(fan_out)

        if c.stem_dim:
            dense("stem", c.input_dim, c.stem_dim)
        for l in range(c.L):
            fan_in = c.block_input if l == 0 else c.sub_width
            dense(f"block{l}.shared", fan_in, c.shared_width)
            for j in range(c.g):
                dense(f"block{l}.ind{j}", fan_in, c.individual_width)
            if c.bn_affine:
                for group, width in self._groups(l):
                    self.params[f"block{l}.bn.{group}.scale"] = np.ones(width)
                    self.params[f"block{l}.bn.{group}.shift"] = np.zeros(width)
        if c.proj_dims:
            dense("proj.0", c.sub_width, c.proj_dims[0])
            dense("proj.1", c.proj_dims[0], c.proj_dims[1])
            dense("pred.0", c.proj_dims[1], c.pred_dims[0])
            dense("pred.1", c.pred_dims[0], c.pred_dims[1])

    def _groups(self, l, target: Target = FULL):
        c = self.config
        if target == FULL:
            inds = range(c.g)
        else:
            inds = (target.digits[l],)
        return [("shared", c.shared_width)] + [(f"ind{j}", c.individual_width) for j in inds]

    def bn_layers(self, target: Target = FULL) -> list[str]:
        names = [f"block{l}.{grp}" for l in range(self.config.L) for grp, _ in self._groups(l, target)]
        if self.config.proj_dims and self.config.head_bn:
            names += ["proj.0", "proj.1", "pred.0"]
        return names

    # views --------------------------------------------------------------
    def subnet_params(self, target: Target) -> dict[str, np.ndarray]:
        """Parameters used by ``target``: the same array objects, never copies."""
        _check_target(self.config, target)
        if target == FULL:
            return dict(self.params)
        c = self.config
        keep = set()
        if c.stem_dim:
            keep |= {"stem.w", "stem.b"}
        for l in range(c.L):
            for grp, _ in self._groups(l, target):
                keep |= {f"block{l}.{grp}.w", f"block{l}.{grp}.b"}
                if c.bn_affine:
                    keep |= {f"block{l}.bn.{grp}.scale", f"block{l}.bn.{grp}.shift"}
        keep |= {n for n in self.params if n.startswith(("proj.", "pred."))}
        return {n: a for n, a in self.params.items() if n in keep}

    def param_count(self, target: Target = FULL) -> int:
        return int(sum(a.size for a in self.subnet_params(target).values()))

    def block_widths(self) -> list[int]:
        c = self.config
        return [c.shared_width + c.g * c.individual_width] * c.L

    # forward ------------------------------------------------------------
    def forward(self, target: Target, x: np.ndarray, mode: str = "train", bn=None) -> ForwardResult:
        c = self.config
        _check_target(c, target)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != c.input_dim:
            raise ValueError(f"batch must be b x {c.input_dim}, got {x.shape}")
        train = mode == "train"
        if not train and mode != "eval":
            raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
        if train and x.shape[0] < 2:
            raise ValueError("train-mode batch norm needs at least 2 samples")
        stats = None
        if not train:
            stats = bn.get(target) if bn is not None else None
            if stats is None:
                raise CalibrationRequired(f"no BN statistics for target {target_key(target)}; run bn_calibrate")
        P = self.params
        cache = {"target": target, "version": self._version, "layers": {}}
        layers = cache["layers"]
        bn_batch = {}

        def run(name, inp, bn_name=None, relu=True, affine=None, use_bn=True):
            kw = {}
            if affine is not None:
                kw = {"scale": P[f"{affine}.scale"], "shift": P[f"{affine}.shift"]}
            out, lc, bs = _layer_forward(
                inp, P[f"{name}.w"], P[f"{name}.b"], bn=use_bn, relu=relu, train=train,
                stats=None if train or not use_bn else stats[bn_name], **kw)
            layers[bn_name or name] = lc
            if bs is not None:
                bn_batch[bn_name] = bs
            return out

        h = x
        if c.stem_dim:
            h = run("stem", x, use_bn=False)
        shared_prev, ind_prev = None, None
        for l in range(c.L):
            groups = self._groups(l, target)
            inputs = {}
            if l == 0:
                for grp, _ in groups:
                    inputs[grp] = h
            elif target == FULL:
                inputs["shared"] = np.concatenate([shared_prev, _mean(ind_prev)], axis=1)
                for j in range(c.g):
                    inputs[f"ind{j}"] = np.concatenate([shared_prev, ind_prev[j]], axis=1)
            else:
                joined = np.concatenate([shared_prev, ind_prev[0]], axis=1)
                for grp, _ in groups:
                    inputs[grp] = joined
            outs = {}
            for grp, _ in groups:
                name = f"block{l}.{grp}"
                affine = f"block{l}.bn.{grp}" if c.bn_affine else None
                outs[grp] = run(name, inputs[grp], bn_name=name, affine=affine)
            shared_prev = outs["shared"]
            ind_prev = [outs[grp] for grp, _ in groups[1:]]
        backbone = np.concatenate([shared_prev] + ind_prev, axis=1)
        head_in = np.concatenate([shared_prev, _mean(ind_prev)], axis=1)
        if c.proj_dims:
            hb = c.head_bn
            z = run("proj.0", head_in, bn_name="proj.0", use_bn=hb)
            z = run("proj.1", z, bn_name="proj.1", relu=False, use_bn=hb)
            p = run("pred.0", z, bn_name="pred.0", use_bn=hb)
            p = run("pred.1", p, relu=False, use_bn=False)
        else:
            z = head_in
            p = head_in
        cache["n_ind"] = len(ind_prev)
        return ForwardResult(backbone, z, p, cache, bn_batch)

    # backward -----------------------------------------------------------
    def backward(self, cache: dict, dp=None, dz=None) -> dict[str, np.ndarray]:
        """Gradients for the target's parameter view given upstream ``dp``/``dz``."""
        if cache.get("version") != self._version:
            raise StaleCacheError("parameters changed since this forward pass")
        c = self.config
        target = cache["target"]
        layers = cache["layers"]
        grads = {n: np.zeros_like(a) for n, a in self.subnet_params(target).items()}

        def back(name, dout, bn_name=None, affine=None):
            din, g = _layer_backward(dout, layers[bn_name or name])
            grads[f"{name}.w"] += g["w"]
            grads[f"{name}.b"] += g["b"]
            if affine is not None and "scale" in g:
                grads[f"{affine}.scale"] += g["scale"]
                grads[f"{affine}.shift"] += g["shift"]
            return din

        n_ind = cache["n_ind"]
        if c.proj_dims:
            z_shape = layers["proj.1"]["inp"].shape[0], c.proj_dims[1]
            dp = np.zeros(z_shape) if dp is None else dp
            dz_total = np.zeros(z_shape) if dz is None else np.array(dz, dtype=np.float64)
            d = back("pred.1", dp)
            dz_total = dz_total + back("pred.0", d)
            d = back("proj.1", dz_total)
            d_head = back("proj.0", d)
        else:
            b = layers[f"block{c.L - 1}.shared"]["inp"].shape[0]
            d_head = np.zeros((b, c.sub_width))
            if dp is not None:
                d_head = d_head + dp
            if dz is not None:
                d_head = d_head + dz
        cs = c.shared_width
        d_shared = d_head[:, :cs].copy()
        d_ind = [d_head[:, cs:] / n_ind for _ in range(n_ind)]
        d_h = None
        for l in reversed(range(c.L)):
            groups = self._groups(l, target)
            d_in = {}
            d_in["shared"] = back(f"block{l}.shared", d_shared, affine=f"block{l}.bn.shared")
            for (grp, _), dg in zip(groups[1:], d_ind):
                d_in[grp] = back(f"block{l}.{grp}", dg, affine=f"block{l}.bn.{grp}")
            if l == 0:
                d_h = sum(d_in[grp] for grp, _ in groups)
                break
            d_shared = sum(d_in[grp][:, :cs] for grp, _ in groups)
            if target == FULL:
                spread = d_in["shared"][:, cs:] / n_ind
                d_ind = [d_in[f"ind{j}"][:, cs:] + spread for j in range(c.g)]
            else:
                d_ind = [sum(d_in[grp][:, cs:] for grp, _ in groups)]
        if c.stem_dim:
            back("stem", d_h)
        return grads

    def touch(self) -> None:
        """Mark parameters as modified; invalidates outstanding caches."""
        self._version += 1

    # persistence --------------------------------------------------------
    def to_checkpoint(self, meta: dict | None = None, bn=None) -> Checkpoint:
        m = dict(meta or {})
        m.update(self.config.to_meta())  # the net's own layout wins over a config snapshot
        tensors = dict(self.params)
        if bn is not None:
            tensors.update(bn.to_tensors())
        return Checkpoint(m, tensors)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "SdrNet":
        net = cls(NetConfig.from_meta(ckpt.meta))
        for name, arr in net.params.items():
            if name not in ckpt.tensors:
                raise KeyError(f"checkpoint lacks parameter {name}")
            net.params[name] = ckpt.tensors[name].reshape(arr.shape).copy()
        return net


def _mean(parts):
    if len(parts) == 1:
        return parts[0]
    total = parts[0].copy()
    for part in parts[1:]:
        total += part
    return total / len(parts)


# -------------------------------------------------------------- BN stats --

class BnStats:
    """Per-target BN statistics: ``{target_key: {layer: (mean, var)}}``."""

    def __init__(self):
        self._stats: dict[str, dict] = {}

    def get(self, target: Target):
        return self._stats.get(target_key(target))

    def set(self, target: Target, layers: dict) -> None:
        self._stats[target_key(target)] = layers

    def __contains__(self, target):
        return target_key(target) in self._stats

    def keys(self):
        return list(self._stats)

    def to_tensors(self) -> dict:
        out = {}
        for key in sorted(self._stats):
            for layer, (mean, var) in self._stats[key].items():
                out[f"bnstats.{key}.{layer}.mean"] = mean
                out[f"bnstats.{key}.{layer}.var"] = var
        return out

    @classmethod
    def from_tensors(cls, tensors: dict) -> "BnStats":
        stats = cls()
        for name, arr in tensors.items():
            if not name.startswith("bnstats.") or not name.endswith(".mean"):
                continue
            key, layer = name[len("bnstats."):-len(".mean")].split(".", 1)
            var = tensors[name[:-len(".mean")] + ".var"]
            stats._stats.setdefault(key, {})[layer] = (arr.reshape(-1).copy(), var.reshape(-1).copy())
        return stats


def bn_calibrate(net: SdrNet, target: Target, samples: np.ndarray, batch_size: int = 256,
                 registry: BnStats | None = None) -> dict:
    """Average per-batch BN statistics of ``target`` over ``samples``.

    Samples are visited in order, in ``ceil(n / batch_size)`` near-equal chunks.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = len(samples)
    if n < 2:
        raise ValueError("BN calibration needs at least 2 samples")
    chunks = np.array_split(samples, -(-n // batch_size))
    sums: dict = {}
    for chunk in chunks:
        res = net.forward(target, chunk, mode="train")
        for layer, (mean, var) in res.bn_batch.items():
            if layer in sums:
                sums[layer][0] += mean
                sums[layer][1] += var
            else:
                sums[layer] = [mean.copy(), var.copy()]
    layers = {layer: (m / len(chunks), v / len(chunks)) for layer, (m, v) in sums.items()}
    if registry is not None:
        registry.set(target, layers)
    return layers
