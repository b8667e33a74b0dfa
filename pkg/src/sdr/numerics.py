"""Dense float64 helpers, seeded randomness, SGD and a finite-difference oracle.

Matrices are plain ``numpy.ndarray`` of dtype float64.  Randomness comes from
``numpy.random.Generator`` over PCG64, which numpy guarantees to be stable for
a given seed across platforms and releases.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, MutableMapping

import numpy as np

EPS = 1e-12


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class NumericError(ArithmeticError):
    """A function produced a non-finite value."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` independent generators derived from one seed."""
    seqs = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(s)) for s in seqs]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def l2_normalize(v: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Scale ``v`` (or each row of a matrix) to unit l2 norm, guarded by ``eps``."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, eps)


def neg_cosine(a: np.ndarray, b: np.ndarray, eps: float = EPS) -> float:
    return -float(np.dot(l2_normalize(a, eps), l2_normalize(b, eps)))


def neg_cosine_rows(a: np.ndarray, b: np.ndarray, eps: float = EPS):
    """Mean row-wise negative cosine and its gradient with respect to ``a``.

    ``b`` is treated as a constant (stop-gradient).
    """
    na = np.maximum(np.linalg.norm(a, axis=1, keepdims=True), eps)
    an = a / na
    bn = l2_normalize(b, eps)
    cos = np.sum(an * bn, axis=1, keepdims=True)
    m = a.shape[0]
    loss = -float(cos.mean())
    grad = -(bn - an * cos) / na / m
    return loss, grad


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    no_decay: tuple = ()  # name suffixes exempt from weight decay

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def sgd_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: SgdState,
) -> None:
    """In-place momentum SGD on the entries named in ``grads``.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Parameters absent from ``grads`` and their velocity buffers are untouched;
    names ending in one of ``state.no_decay`` skip the decay term.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
            state.velocity[name] = v
        elif v.shape != p.shape:
            raise ShapeError(f"{name}: velocity {v.shape} vs param {p.shape}")
        v *= state.momentum
        v += g
        if state.weight_decay and not name.endswith(state.no_decay):
            v += state.weight_decay * p
        if state.learning_rate:
            p -= state.learning_rate * v


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm relative error used by the gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)
