"""Bias-free linear maps: dense, LoRA (frozen base plus low-rank residual) and pruned.

All maps act on row batches ``x`` of shape ``(n, d_in)`` and return
``(n, d_out)``; :func:`apply` is the single-vector convenience.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Module, Param


class DenseLinear(Module):
    def __init__(self, weight, trainable: bool = True):
        self.weight = Param(weight, "trainable" if trainable else "frozen")

    @property
    def shape(self):
        return self.weight.shape

    def effective_weight(self) -> np.ndarray:
        return self.weight.value

    def forward(self, x):
        self._x = x
        return x @ self.weight.value.T

    def backward(self, g):
        self.weight.accumulate(g.T @ self._x)
        return g @ self.weight.value


class LoRALinear(Module):
    """``W_eff = W0 + (alpha / r) B A`` with ``W0`` frozen.

    ``base_norm`` and ``base_rank`` describe how ``W0`` was built (``None``
    when it was copied from an existing dense map).
    """

    def __init__(self, base, A, B, alpha: float | None = None,
                 base_norm: float | None = None, base_rank: int | None = None):
        base, A, B = (np.asarray(v, dtype=np.float64) for v in (base, A, B))
        d_out, d_in = base.shape
        r = A.shape[0]
        if A.shape != (r, d_in) or B.shape != (d_out, r):
            raise ValueError(f"adapter shapes A{A.shape}, B{B.shape} do not fit base {base.shape}")
        self.base = Param(base, "frozen")
        self.A = Param(A, "lora")
        self.B = Param(B, "lora")
        self.rank = r
        self.alpha = float(r if alpha is None else alpha)
        self.base_norm = base_norm
        self.base_rank = base_rank

    @property
    def shape(self):
        return self.base.shape

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B.value @ self.A.value)

    def effective_weight(self) -> np.ndarray:
        return self.base.value + self.delta()

    def forward(self, x):
        # never materialize B A: cost stays O(n r (d_in + d_out)) beyond the base product
        self._x = x
        self._u = x @ self.A.value.T
        return x @ self.base.value.T + self.scaling * (self._u @ self.B.value.T)

    def backward(self, g):
        gv = self.scaling * (g @ self.B.value)
        self.B.accumulate(self.scaling * (g.T @ self._u))
        self.A.accumulate(gv.T @ self._x)
        return g @ self.base.value + gv @ self.A.value


class PrunedLinear(Module):
    """Dense map whose masked entries are zero and stay zero."""

    def __init__(self, weight, mask):
        mask = np.asarray(mask, dtype=bool)
        weight = np.asarray(weight, dtype=np.float64)
        if mask.shape != weight.shape:
            raise ValueError(f"mask shape {mask.shape} != weight shape {weight.shape}")
        self.weight = Param(np.where(mask, weight, 0.0))
        self._mask = mask.copy()
        self._mask.setflags(write=False)

    @property
    def mask(self) -> np.ndarray:
        return self._mask

    @property
    def sparsity(self) -> float:
        return 1.0 - self._mask.mean()

    @property
    def shape(self):
        return self.weight.shape

    def effective_weight(self) -> np.ndarray:
        return self.weight.value * self._mask

    def forward(self, x):
        self._x = x
        return x @ self.effective_weight().T

    def backward(self, g):
        self.weight.accumulate((g.T @ self._x) * self._mask)
        return g @ self.effective_weight()


def effective_weight(m) -> np.ndarray:
    return m.effective_weight()


def apply(m, x) -> np.ndarray:
    """``W_eff x`` for a single vector ``x``."""
    x = np.asarray(x, dtype=np.float64)
    d_out, d_in = m.shape
    if x.shape != (d_in,):
        raise ValueError(f"expected input of length {d_in}, got shape {x.shape}")
    return m.effective_weight() @ x


@dataclass(frozen=True)
class LoRAInit:
    """How adapter factors are drawn.

    ``zero-b``: ``A ~ N(0, a_std^2)`` and ``B = 0`` so the map starts at its base.
    ``normal-both``: both factors Gaussian, giving a nonzero residual from step 0.
    """

    mode: str = "zero-b"
    a_std: float | None = None
    b_std: float | None = None

    def __post_init__(self):
        if self.mode not in ("zero-b", "normal-both"):
            raise ValueError(f"unknown LoRA init mode {self.mode!r}")

    def stds(self, rank: int, d_out: int, d_in: int) -> tuple[float, float]:
        if self.mode == "zero-b":
            a_std = 1.0 / np.sqrt(d_in) if self.a_std is None else self.a_std
            return a_std, 0.0
        # 1/r and 1/d_out are variances
        a_std = np.sqrt(1.0 / rank) if self.a_std is None else self.a_std
        b_std = np.sqrt(1.0 / d_out) if self.b_std is None else self.b_std
        return a_std, b_std

    def sample(self, rng: np.random.Generator, rank: int, d_out: int, d_in: int):
        a_std, b_std = self.stds(rank, d_out, d_in)
        A = rng.normal(0.0, a_std, size=(rank, d_in))
        B = np.zeros((d_out, rank)) if b_std == 0.0 else rng.normal(0.0, b_std, size=(d_out, rank))
        return A, B


def uniform_fan_in(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    """``U(-1/sqrt(d_in), 1/sqrt(d_in))``, the usual default for bias-free dense layers."""
    bound = 1.0 / np.sqrt(d_in)
    return rng.uniform(-bound, bound, size=(d_out, d_in))


def _semi_orthogonal(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    tall = d_out >= d_in
    G = rng.standard_normal((d_out, d_in) if tall else (d_in, d_out))
    Q, R = np.linalg.qr(G)
    Q = Q * np.sign(np.diag(R))
    return Q if tall else Q.T


def build_frozen_base(d_out: int, d_in: int, base_rank: int | None = None,
                      kappa: float = 0.5, rng: np.random.Generator | None = None,
                      rescale: bool = True) -> np.ndarray:
    """Random base matrix of a given rank with every row rescaled to norm ``kappa``.

    Full rank gives a random semi-orthogonal matrix; lower ranks use a
    product of two Gaussian factors with inner dimension ``base_rank``.
    """
    full = min(d_out, d_in)
    k = full if base_rank is None else int(base_rank)
    if not 1 <= k <= full:
        raise ValueError(f"base_rank must lie in [1, {full}], got {base_rank}")
    if not 0.0 < kappa < 1.0:
        raise ValueError(f"kappa must lie in (0, 1), got {kappa}")
    rng = rng if rng is not None else np.random.default_rng()
    if k == full:
        W = _semi_orthogonal(rng, d_out, d_in)
    else:
        W = rng.standard_normal((d_out, k)) @ rng.standard_normal((k, d_in))
    if rescale:
        W = W * (kappa / np.linalg.norm(W, axis=1, keepdims=True))
    return W


def build_prune_mask(d_out: int, d_in: int, sparsity: float,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Uniformly random keep-mask with ``floor(sparsity * d_out * d_in)`` zeros."""
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    rng = rng if rng is not None else np.random.default_rng()
    size = d_out * d_in
    n_zero = int(np.floor(sparsity * size))
    mask = np.ones(size, dtype=bool)
    mask[rng.permutation(size)[:n_zero]] = False
    return mask.reshape(d_out, d_in)


def save_snapshot(path, module: Module):
    """Write every parameter of ``module`` to an ``.npz`` archive keyed by name.

    Each entry is a ``.npy`` record, whose header stores dtype and shape.
    """
    path = Path(path)
    np.savez(path, **{name: p.value for name, p in module.named_params()})


def load_snapshot(path, module: Module):
    """Copy values from :func:`save_snapshot` output back into ``module`` in place."""
    with np.load(Path(path)) as data:
        named = dict(module.named_params())
        missing = set(named) - set(data.files)
        if missing:
            raise KeyError(f"snapshot lacks parameters: {sorted(missing)}")
        for name, p in named.items():
            arr = data[name]
            if arr.shape != p.value.shape:
                raise ValueError(f"{name}: snapshot shape {arr.shape} != {p.value.shape}")
            writable = p.value.flags.writeable
            p.value.setflags(write=True)
            p.value[...] = arr
            p.value.setflags(write=writable)
    return module
