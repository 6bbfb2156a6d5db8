"""Minimal reverse-mode machinery for the critic shapes used here.

Each :class:`Module` records what it needs during ``forward`` and returns
the input gradient from ``backward`` while accumulating parameter
gradients into :attr:`Param.grad`. A network's backward pass replays its
modules in reverse; the recorded activations play the role of a tape.
Frozen parameters never receive a gradient.
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

PARAM_KINDS = ("trainable", "frozen", "lora")


class Param:
    """A float64 tensor tagged trainable, frozen or lora (adapter factor)."""

    __slots__ = ("value", "kind", "grad")

    def __init__(self, value, kind: str = "trainable"):
        if kind not in PARAM_KINDS:
            raise ValueError(f"unknown parameter kind {kind!r}")
        self.value = np.array(value, dtype=np.float64)
        self.kind = kind
        self.grad = None
        if kind == "frozen":
            self.value.setflags(write=False)

    @property
    def trainable(self) -> bool:
        return self.kind != "frozen"

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray):
        if not self.trainable:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self):
        return f"Param(shape={self.value.shape}, kind={self.kind})"


class Module:
    """Base class. Parameters and sub-modules are discovered from attributes."""

    def forward(self, x):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_params(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}.{i}.")

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.grad = None


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, g):
        return g * self._mask


def l2_normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise FloatingPointError("cannot l2-normalize a zero vector")
    return x / norms, norms


class L2Norm(Module):
    """Row-wise projection onto the unit sphere."""

    def forward(self, x):
        y, self._norms = l2_normalize_rows(x)
        self._y = y
        return y

    def backward(self, g):
        y = self._y
        return (g - y * np.sum(g * y, axis=-1, keepdims=True)) / self._norms


class Scale(Module):
    """Elementwise learnable scale ``s * x``."""

    def __init__(self, dim: int, init: float = 1.0):
        self.scale = Param(np.full(dim, init))

    def forward(self, x):
        self._x = x
        return x * self.scale.value

    def backward(self, g):
        self.scale.accumulate(np.sum(g * self._x, axis=0))
        return g * self.scale.value


class LayerNorm(Module):
    """Per-sample normalization over features with learnable scale and shift."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Param(np.ones(dim))
        self.shift = Param(np.zeros(dim))

    def normalize(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + self.eps), np.sqrt(var + self.eps)

    def forward(self, x):
        self._xhat, self._std = self.normalize(x)
        return self._xhat * self.gain.value + self.shift.value

    def backward(self, g):
        xhat = self._xhat
        self.gain.accumulate(np.sum(g * xhat, axis=0))
        self.shift.accumulate(np.sum(g, axis=0))
        gx = g * self.gain.value
        return (gx - gx.mean(axis=-1, keepdims=True)
                - xhat * np.mean(gx * xhat, axis=-1, keepdims=True)) / self._std


def finite_difference_check(loss_fn: Callable[[], float], params: list[Param],
                            analytic: list[np.ndarray], h: float = 1e-5,
                            max_entries: int | None = None, floor: float = 1e-6,
                            rng: np.random.Generator | None = None) -> float:
    """Largest relative error between ``analytic`` gradients and central differences.

    ``loss_fn`` must recompute the loss from the current parameter values.
    With ``max_entries`` set, that many entries per tensor are probed at random.
    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps round-off on near-zero entries from dominating.
    """
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        g = np.asarray(grad).reshape(-1)
        writable = p.value.flags.writeable
        p.value.setflags(write=True)
        try:
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn()
                flat[i] = orig - h
                down = loss_fn()
                flat[i] = orig
                num = (up - down) / (2 * h)
                err = abs(g[i] - num) / max(abs(g[i]), abs(num), floor)
                worst = max(worst, err)
        finally:
            p.value.setflags(write=writable)
    return worst
