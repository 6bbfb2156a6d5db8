"""Adam / AdamW, Polyak target averaging and post-update weight projection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Module, Param
from .critics import ParamRegistry, SimbaCritic
from .hypersphere import ProjectionConfig, project_lora, row_normalize
from .linear import DenseLinear, LoRALinear, PrunedLinear


@dataclass
class OptimizerState:
    """Moments for one tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = False


def adam_step(state: OptimizerState, tensor: np.ndarray, grad: np.ndarray,
              cfg: AdamConfig = AdamConfig()) -> np.ndarray:
    """Bias-corrected Adam update of ``tensor`` in place.

    In decoupled mode the weight is first shrunk by ``1 - lr * weight_decay``.
    """
    if grad.shape != tensor.shape or state.m.shape != tensor.shape:
        raise ValueError(f"shape mismatch: tensor {tensor.shape}, grad {grad.shape}")
    state.t += 1
    m, v = state.m, state.v
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * np.square(grad)
    if cfg.decoupled and cfg.weight_decay:
        tensor *= 1.0 - cfg.lr * cfg.weight_decay
    denom = np.sqrt(v / (1.0 - cfg.beta2 ** state.t))
    denom += cfg.eps
    tensor -= (cfg.lr / (1.0 - cfg.beta1 ** state.t)) * m / denom
    return tensor


@dataclass
class ParamGroup:
    params: list[Param]
    cfg: AdamConfig
    states: list[OptimizerState] = field(default_factory=list)

    def __post_init__(self):
        self.states = [OptimizerState(np.zeros_like(p.value), np.zeros_like(p.value))
                       for p in self.params]


class Adam:
    """Adam over parameter groups; frozen parameters are rejected.

    A tensor whose ``grad`` is ``None`` is skipped for that step.
    """

    def __init__(self, groups: list[ParamGroup]):
        seen = set()
        for group in groups:
            for p in group.params:
                if not p.trainable:
                    raise ValueError("frozen parameters cannot be optimized")
                if id(p) in seen:
                    raise ValueError("a parameter appears in two optimizer groups")
                seen.add(id(p))
        self.groups = groups

    def step(self):
        for group in self.groups:
            for p, state in zip(group.params, group.states):
                if p.grad is not None:
                    adam_step(state, p.value, p.grad, group.cfg)

    def zero_grad(self):
        for group in self.groups:
            for p in group.params:
                p.grad = None


def make_optimizer(module: Module, lr: float = 1e-3, lora_weight_decay: float = 0.0,
                   base: AdamConfig | None = None) -> Adam:
    """Adam for plain tensors, AdamW (decoupled decay) for adapter factors."""
    reg = ParamRegistry(module)
    base_cfg = base or AdamConfig(lr=lr)
    groups = [ParamGroup(reg.params("base"), base_cfg)]
    lora = reg.params("lora")
    if lora:
        groups.append(ParamGroup(lora, AdamConfig(lr=base_cfg.lr, beta1=base_cfg.beta1,
                                                  beta2=base_cfg.beta2, eps=base_cfg.eps,
                                                  weight_decay=lora_weight_decay,
                                                  decoupled=True)))
    return Adam(groups)


def polyak_update(target: dict[str, Param], online: dict[str, Param], tau: float):
    """``target <- (1 - tau) target + tau online`` for every trainable tensor."""
    if target.keys() != online.keys():
        raise KeyError("target and online registries differ")
    for name, p in online.items():
        if not p.trainable:
            continue
        t = target[name]
        if t.value.shape != p.value.shape:
            raise ValueError(f"{name}: shape mismatch in Polyak update")
        t.value *= 1.0 - tau
        t.value += tau * p.value


HOOK_MODES = ("none", "row_normalize", "project_lora")


def post_update_hook(critic, mode: str = "none", cfg: ProjectionConfig = ProjectionConfig(),
                     maps=None):
    """Project weight rows back onto the unit sphere after an optimizer step.

    ``row_normalize`` rescales rows of plain maps and refuses LoRA maps (it
    would move their frozen base). ``project_lora`` applies the base-preserving
    projection to LoRA maps and plain row normalization to the remaining maps.
    ``maps`` defaults to the critic's normalized maps (SimbaV2) or residual maps.
    """
    if mode not in HOOK_MODES:
        raise ValueError(f"unknown hook mode {mode!r}")
    if mode == "none":
        return critic
    if maps is None:
        maps = critic.normalized_maps() if isinstance(critic, SimbaCritic) else critic.maps()
    lora_maps = [m for m in maps if isinstance(m, LoRALinear)]
    if mode == "row_normalize" and lora_maps:
        raise TypeError("row_normalize would rescale frozen LoRA bases; use project_lora")
    if mode == "project_lora" and not lora_maps:
        raise TypeError("project_lora needs at least one LoRA map")
    for m in maps:
        if isinstance(m, LoRALinear):
            project_lora(m, cfg)
        elif isinstance(m, PrunedLinear):
            m.weight.value[...] = row_normalize(m.weight.value) * m.mask
        elif isinstance(m, DenseLinear):
            m.weight.value[...] = row_normalize(m.weight.value)
        else:
            raise TypeError(f"cannot project a {type(m).__name__}")
    return critic
