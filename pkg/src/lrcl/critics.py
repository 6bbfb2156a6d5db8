"""Critic networks built from the linear maps, plus the parameter registry.

* :class:`ToyCritic` - two bias-free ReLU layers and a linear readout.
* :class:`SimbaCritic` - shift-augmented, hyperspherically normalized
  embedding followed by bottleneck blocks merged with a learned LERP.
* :class:`BroCritic` - residual MLP blocks with layer normalization.

Each critic lists its residual-block maps in ``residual_maps()``; those are
the only maps :func:`lora_wrap` and :func:`prune_wrap` replace.
"""

from __future__ import annotations

import copy

import numpy as np

from .autodiff import L2Norm, LayerNorm, Module, Param, ReLU, Scale
from .linear import (
    DenseLinear,
    LoRAInit,
    LoRALinear,
    PrunedLinear,
    build_frozen_base,
    build_prune_mask,
    uniform_fan_in,
)
from .rng import stream

HEADS = ("scalar", "categorical")


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite activation in {where}")


class _Critic(Module):
    head_kind = "scalar"

    def residual_maps(self) -> list[tuple[object, str]]:
        raise NotImplementedError

    def maps(self):
        return [getattr(owner, attr) for owner, attr in self.residual_maps()]


class ToyCritic(_Critic):
    """``w_out^T ReLU(W1 ReLU(W0 phi))`` with no biases.

    With a categorical head ``w_out`` is an ``(N, H)`` matrix producing logits.
    """

    def __init__(self, layer0, layer1, w_out, head: str = "scalar"):
        if head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        self.layer0 = layer0
        self.layer1 = layer1
        self.w_out = Param(w_out)
        self.head_kind = head
        self._relu0, self._relu1 = ReLU(), ReLU()

    @property
    def hidden(self) -> int:
        return self.layer1.shape[0]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if X.shape[1] != self.layer0.shape[1]:
            raise ValueError(f"expected features of length {self.layer0.shape[1]}, got {X.shape[1]}")
        h0 = self._relu0(self.layer0(X))
        self._h1 = h1 = self._relu1(self.layer1(h0))
        out = h1 @ self.w_out.value.T
        return out[0] if single else out

    def backward(self, g):
        g = np.asarray(g, dtype=np.float64)
        if self.head_kind == "scalar":
            g = g.reshape(-1)
            self.w_out.accumulate(self._h1.T @ g)
            gh1 = np.outer(g, self.w_out.value)
        else:
            g = np.atleast_2d(g)
            self.w_out.accumulate(g.T @ self._h1)
            gh1 = g @ self.w_out.value
        gh0 = self.layer1.backward(self._relu1.backward(gh1))
        return self.layer0.backward(self._relu0.backward(gh0))

    def residual_maps(self):
        return [(self, "layer0"), (self, "layer1")]


def build_toy_critic(feature_dim: int = 64, hidden: int = 256, seed: int = 0,
                     head: str = "scalar", num_atoms: int = 51) -> ToyCritic:
    """Dense toy critic; every weight is ``U(+-1/sqrt(fan_in))`` from the seed's weight stream."""
    rng = stream(seed, "weights")
    W0 = uniform_fan_in(rng, hidden, feature_dim)
    W1 = uniform_fan_in(rng, hidden, hidden)
    out_rows = 1 if head == "scalar" else num_atoms
    w_out = uniform_fan_in(rng, out_rows, hidden)
    if head == "scalar":
        w_out = w_out[0]
    return ToyCritic(DenseLinear(W0), DenseLinear(W1), w_out, head=head)


class SimbaBlock(Module):
    """Inverted bottleneck ``W2 ReLU(s * W1 h)`` normalized, then LERP-merged with ``h``."""

    def __init__(self, w1, w2, scale_init: float = 1.0, beta_init: float = 0.5):
        d_h = w1.shape[1]
        if w1.shape != (w2.shape[1], d_h) or w2.shape[0] != d_h:
            raise ValueError("block maps must be (k x d_h) and (d_h x k)")
        self.w1 = w1
        self.scale = Scale(w1.shape[0], scale_init)
        self.w2 = w2
        self.beta = Param(np.full(d_h, beta_init))
        self._relu, self._norm_inner, self._norm_out = ReLU(), L2Norm(), L2Norm()

    def forward(self, h):
        self._h = h
        u = self._relu(self.scale(self.w1(h)))
        self._ht = ht = self._norm_inner(self.w2(u))
        beta = self.beta.value
        return self._norm_out((1.0 - beta) * h + beta * ht)

    def backward(self, g):
        gm = self._norm_out.backward(g)
        beta = self.beta.value
        self.beta.accumulate(np.sum(gm * (self._ht - self._h), axis=0))
        gv = self._norm_inner.backward(gm * beta)
        gu = self.scale.backward(self._relu.backward(self.w2.backward(gv)))
        return gm * (1.0 - beta) + self.w1.backward(gu)


class SimbaCritic(_Critic):
    def __init__(self, embed, blocks, head, c_shift: float = 1.0, head_kind: str = "categorical"):
        if head_kind not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        self.c_shift = float(c_shift)
        self.embed = embed
        self.embed_scale = Scale(embed.shape[0])
        self.blocks = list(blocks)
        self.head = head
        self.head_kind = head_kind
        self._norm_in, self._norm_embed = L2Norm(), L2Norm()
        self.hidden_states: list[np.ndarray] = []

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        _check_finite(X, "input")
        if X.shape[1] + 1 != self.embed.shape[1]:
            raise ValueError(f"expected inputs of length {self.embed.shape[1] - 1}, got {X.shape[1]}")
        shifted = np.hstack([X, np.full((X.shape[0], 1), self.c_shift)])
        h = self._norm_embed(self.embed_scale(self.embed(self._norm_in(shifted))))
        hs = [h]
        for block in self.blocks:
            h = block(h)
            hs.append(h)
        self.hidden_states = hs
        out = self.head(h)
        _check_finite(out, "head")
        if self.head_kind == "scalar":
            out = out[:, 0]
        return out[0] if single else out

    def backward(self, g):
        g = np.asarray(g, dtype=np.float64)
        g = g.reshape(-1, 1) if self.head_kind == "scalar" else np.atleast_2d(g)
        g = self.head.backward(g)
        for block in reversed(self.blocks):
            g = block.backward(g)
        g = self.embed.backward(self.embed_scale.backward(self._norm_embed.backward(g)))
        return self._norm_in.backward(g)[:, :-1]

    def residual_maps(self):
        return [(b, name) for b in self.blocks for name in ("w1", "w2")]

    def normalized_maps(self):
        """Every weight matrix kept on the unit sphere row-wise."""
        return [self.embed] + self.maps() + [self.head]


def build_simba_critic(input_dim: int, d_h: int = 64, num_blocks: int = 2,
                       num_atoms: int = 51, seed: int = 0, c_shift: float = 1.0,
                       head: str = "categorical", expansion: int = 4) -> SimbaCritic:
    """Desk-scale critic; weight rows start on the unit sphere."""
    rng = stream(seed, "weights")

    def unit_rows(d_out, d_in):
        W = rng.standard_normal((d_out, d_in))
        return W / np.linalg.norm(W, axis=1, keepdims=True)

    embed = DenseLinear(unit_rows(d_h, input_dim + 1))
    blocks = [
        SimbaBlock(DenseLinear(unit_rows(expansion * d_h, d_h)),
                   DenseLinear(unit_rows(d_h, expansion * d_h)),
                   beta_init=1.0 / (num_blocks + 1))
        for _ in range(num_blocks)
    ]
    out = 1 if head == "scalar" else num_atoms
    return SimbaCritic(embed, blocks, DenseLinear(unit_rows(out, d_h)), c_shift=c_shift,
                       head_kind=head)


class BroBlock(Module):
    """``h + LN(W2 ReLU(LN(W1 h)))``."""

    def __init__(self, w1, w2, ln_eps: float = 1e-5):
        self.w1 = w1
        self.ln1 = LayerNorm(w1.shape[0], ln_eps)
        self.w2 = w2
        self.ln2 = LayerNorm(w2.shape[0], ln_eps)
        self._relu = ReLU()

    def forward(self, h):
        return h + self.ln2(self.w2(self._relu(self.ln1(self.w1(h)))))

    def backward(self, g):
        inner = self.w1.backward(self.ln1.backward(self._relu.backward(
            self.w2.backward(self.ln2.backward(g)))))
        return g + inner


class BroCritic(_Critic):
    def __init__(self, w_in, blocks, head, head_kind: str = "categorical", ln_eps: float = 1e-5):
        if head_kind not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        self.w_in = w_in
        self.ln_in = LayerNorm(w_in.shape[0], ln_eps)
        self.blocks = list(blocks)
        self.head = head
        self.head_kind = head_kind
        self._relu = ReLU()
        self.hidden_states: list[np.ndarray] = []

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        _check_finite(X, "input")
        h = self._relu(self.ln_in(self.w_in(X)))
        hs = [h]
        for block in self.blocks:
            h = block(h)
            hs.append(h)
        self.hidden_states = hs
        out = self.head(h)
        _check_finite(out, "head")
        if self.head_kind == "scalar":
            out = out[:, 0]
        return out[0] if single else out

    def backward(self, g):
        g = np.asarray(g, dtype=np.float64)
        g = g.reshape(-1, 1) if self.head_kind == "scalar" else np.atleast_2d(g)
        g = self.head.backward(g)
        for block in reversed(self.blocks):
            g = block.backward(g)
        return self.w_in.backward(self.ln_in.backward(self._relu.backward(g)))

    def residual_maps(self):
        return [(b, name) for b in self.blocks for name in ("w1", "w2")]


def build_bro_critic(input_dim: int, d_h: int = 64, num_blocks: int = 2,
                     num_atoms: int = 51, seed: int = 0, head: str = "categorical",
                     ln_eps: float = 1e-5) -> BroCritic:
    rng = stream(seed, "weights")
    w_in = DenseLinear(uniform_fan_in(rng, d_h, input_dim))
    blocks = [BroBlock(DenseLinear(uniform_fan_in(rng, d_h, d_h)),
                       DenseLinear(uniform_fan_in(rng, d_h, d_h)), ln_eps)
              for _ in range(num_blocks)]
    out = 1 if head == "scalar" else num_atoms
    return BroCritic(w_in, blocks, DenseLinear(uniform_fan_in(rng, out, d_h)),
                     head_kind=head, ln_eps=ln_eps)


BASE_MODES = ("keep", "fresh", "none")


def lora_wrap(critic: _Critic, rank: int, init: LoRAInit = LoRAInit(), kappa: float = 0.5,
              base_rank: int | None = None, base: str = "keep", alpha: float | None = None,
              seed: int = 0) -> _Critic:
    """Copy of ``critic`` with every residual-block map replaced by a LoRA map.

    ``base`` picks the frozen matrix: ``"keep"`` reuses the current dense
    weight, ``"fresh"`` draws a new base of rank ``base_rank`` with row norm
    ``kappa``, ``"none"`` uses zeros (``W = (alpha/r) B A``). Embedding,
    head, scale, LERP and normalization parameters stay as they are.
    """
    if base not in BASE_MODES:
        raise ValueError(f"base must be one of {BASE_MODES}")
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    wrapped = copy.deepcopy(critic)
    rng_base = stream(seed, "base")
    rng_adapt = stream(seed, "adapters")
    for owner, attr in wrapped.residual_maps():
        dense = getattr(owner, attr)
        d_out, d_in = dense.shape
        if rank > max(d_out, d_in):
            raise ValueError(f"rank {rank} exceeds the dimensions of a {d_out}x{d_in} map")
        if base == "keep":
            W0, norm, brank = dense.effective_weight().copy(), None, None
        elif base == "fresh":
            W0 = build_frozen_base(d_out, d_in, base_rank, kappa, rng_base)
            norm, brank = kappa, (min(d_out, d_in) if base_rank is None else base_rank)
        else:
            W0, norm, brank = np.zeros((d_out, d_in)), 0.0, 0
        A, B = init.sample(rng_adapt, rank, d_out, d_in)
        setattr(owner, attr, LoRALinear(W0, A, B, alpha=alpha, base_norm=norm, base_rank=brank))
    return wrapped


def prune_wrap(critic: _Critic, sparsity: float, seed: int = 0) -> _Critic:
    """Copy of ``critic`` with one-shot random masks on every residual-block map."""
    wrapped = copy.deepcopy(critic)
    rng = stream(seed, "mask")
    for owner, attr in wrapped.residual_maps():
        dense = getattr(owner, attr)
        mask = build_prune_mask(*dense.shape, sparsity, rng)
        setattr(owner, attr, PrunedLinear(dense.effective_weight(), mask))
    return wrapped


GROUPS = ("base", "lora", "frozen")


class ParamRegistry:
    """Named view of a critic's tensors split into optimizer groups.

    ``base`` holds plainly trainable tensors, ``lora`` the adapter factors and
    ``frozen`` tensors that must never change.
    """

    _group_of_kind = {"trainable": "base", "lora": "lora", "frozen": "frozen"}

    def __init__(self, module: Module):
        self.named = dict(module.named_params())

    def group(self, name: str) -> str:
        return self._group_of_kind[self.named[name].kind]

    def names(self, group: str | None = None) -> list[str]:
        if group is None:
            return list(self.named)
        return [n for n in self.named if self.group(n) == group]

    def params(self, group: str) -> list[Param]:
        return [self.named[n] for n in self.names(group)]

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.named.items() if p.trainable]

    def count(self, group: str | None = None, trainable: bool | None = None) -> int:
        names = self.names(group)
        if trainable is not None:
            names = [n for n in names if self.named[n].trainable == trainable]
        return int(sum(self.named[n].value.size for n in names))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self.named.items()}

    def changed(self, snapshot: dict[str, np.ndarray]) -> set[str]:
        return {n for n, p in self.named.items() if not np.array_equal(p.value, snapshot[n])}
