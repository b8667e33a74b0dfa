"""``key = value`` configuration files with dotted section prefixes.

Example::

    seed = 7
    net.g = 2          # individual groups per block
    net.L = 2
    train.kd_kind = siamkd
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .clustering import ClusterConfig
from .data import SyntheticSpec
from .ssl import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetSection:
    L: int = 2
    g: int = 2
    shared_width: int = 4
    individual_width: int = 12
    proj_dims: tuple = (32, 32)
    pred_dims: tuple = (16, 32)
    stem_dim: int = 0
    bn_affine: bool = True
    head_bn: bool = True


@dataclass(frozen=True)
class ClusterSection:
    k: int = 0  # 0 means g**L
    epochs: int = 30
    params: ClusterConfig = ClusterConfig()


@dataclass(frozen=True)
class Config:
    seed: int = 0
    data: SyntheticSpec = SyntheticSpec()
    input: str = ""
    input_format: str = ""
    net: NetSection = NetSection()
    cluster: ClusterSection = ClusterSection()
    train: TrainConfig = TrainConfig()
    base_steps: int = 0  # 0 means train.total_steps
    knn_k: int = 200
    knn_weighted: bool = False
    bn_batch: int = 256
    extra: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.cluster.k or self.net.g ** self.net.L

    def validate(self) -> "Config":
        expected = self.net.g ** self.net.L
        if self.cluster.k and self.cluster.k != expected:
            raise ConfigError(
                f"cluster.k = {self.cluster.k} but net.g^net.L = {self.net.g}^{self.net.L} = {expected};"
                " the number of clusters must equal the number of paths")
        if self.knn_k < 1:
            raise ConfigError("knn.k must be >= 1")
        return self

    def with_seed(self, seed: int) -> "Config":
        return replace(self, seed=int(seed), data=replace(self.data, seed=int(seed)))

    def snapshot(self) -> dict:
        """Flat ``key -> str`` view, used as checkpoint metadata."""
        return {k: _fmt(v) for k, v in _flatten(self).items()}


_SECTIONS = {
    "data": ("data", None),
    "net": ("net", None),
    "cluster": ("cluster", None),
    "train": ("train", None),
    "augment": ("train", "augment"),
}


def _flatten(cfg: Config) -> dict:
    out = {"seed": cfg.seed, "base_steps": cfg.base_steps, "knn.k": cfg.knn_k,
           "knn.weighted": cfg.knn_weighted,
           "bn.batch_size": cfg.bn_batch}
    if cfg.input:
        out["input"] = cfg.input
    if cfg.input_format:
        out["input_format"] = cfg.input_format
    for f in fields(cfg.data):
        out[f"data.{f.name}"] = getattr(cfg.data, f.name)
    for f in fields(cfg.net):
        out[f"net.{f.name}"] = getattr(cfg.net, f.name)
    out["cluster.k"] = cfg.k
    out["cluster.epochs"] = cfg.cluster.epochs
    for f in fields(cfg.cluster.params):
        out[f"cluster.{f.name}"] = getattr(cfg.cluster.params, f.name)
    for f in fields(cfg.train):
        if f.name != "augment":
            out[f"train.{f.name}"] = getattr(cfg.train, f.name)
    for f in fields(cfg.train.augment):
        out[f"augment.{f.name}"] = getattr(cfg.train.augment, f.name)
    return out


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    if v is None:
        return ""
    return str(v)


def _coerce(template, raw: str, key: str):
    try:
        if isinstance(template, bool):
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple) or template is None:
            return tuple(int(v) for v in raw.split(",") if v.strip()) or None
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def _set(obj, name: str, raw: str, key: str):
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    return replace(obj, **{name: _coerce(getattr(obj, name), raw, key)})


def parse_config(text: str, origin: str = "<config>") -> Config:
    cfg = Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            cfg = apply_override(cfg, key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return cfg.validate()


def apply_override(cfg: Config, key: str, raw: str) -> Config:
    if key == "seed":
        return cfg.with_seed(int(raw))
    if key in ("base_steps", "input", "input_format"):
        return _set(cfg, key, raw, key)
    if key == "knn.k":
        return replace(cfg, knn_k=int(raw))
    if key == "knn.weighted":
        return replace(cfg, knn_weighted=_coerce(False, raw, key))
    if key == "bn.batch_size":
        return replace(cfg, bn_batch=int(raw))
    section, _, name = key.partition(".")
    if section == "data":
        return replace(cfg, data=_set(cfg.data, name, raw, key))
    if section == "net":
        return replace(cfg, net=_set(cfg.net, name, raw, key))
    if section == "cluster":
        if name in ("k", "epochs"):
            return replace(cfg, cluster=_set(cfg.cluster, name, raw, key))
        return replace(cfg, cluster=replace(cfg.cluster, params=_set(cfg.cluster.params, name, raw, key)))
    if section == "train":
        return replace(cfg, train=_set(cfg.train, name, raw, key))
    if section == "augment":
        return replace(cfg, train=replace(cfg.train, augment=_set(cfg.train.augment, name, raw, key)))
    raise ConfigError(f"unknown config key {key!r}")


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))
