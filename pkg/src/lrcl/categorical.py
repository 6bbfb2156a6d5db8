"""Categorical value heads over a fixed, evenly spaced support."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ValueSupport:
    v_min: float = -1.0
    v_max: float = 2.0
    num_atoms: int = 51
    atoms: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_atoms < 2 or not self.v_max > self.v_min:
            raise ValueError("support needs at least two atoms and v_max > v_min")
        i = np.arange(self.num_atoms)
        z = self.v_min + i / (self.num_atoms - 1) * (self.v_max - self.v_min)
        z[-1] = self.v_max
        z.setflags(write=False)
        object.__setattr__(self, "atoms", z)

    @property
    def delta_z(self) -> float:
        return (self.v_max - self.v_min) / (self.num_atoms - 1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("logits must be finite")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def logits_to_probs(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    return np.exp(log_softmax(logits))


def expectation(probs: np.ndarray, support: ValueSupport) -> np.ndarray:
    return np.asarray(probs) @ support.atoms


def c51_project(probs: np.ndarray, reward, discount, support: ValueSupport) -> np.ndarray:
    """Shift atoms to ``clip(r + discount * z)`` and split their mass onto neighbours.

    ``discount`` is the full continuation factor (gamma^n times the mask).
    Works on a single distribution or a batch along the leading axis, with
    ``reward`` / ``discount`` broadcast per row. A backed-up value that lands
    exactly on an atom sends all its mass there.
    """
    probs = np.asarray(probs, dtype=np.float64)
    single = probs.ndim == 1
    p = np.atleast_2d(probs)
    n, N = p.shape
    r = np.broadcast_to(np.asarray(reward, dtype=np.float64).reshape(-1, 1), (n, 1))
    g = np.broadcast_to(np.asarray(discount, dtype=np.float64).reshape(-1, 1), (n, 1))
    tz = np.clip(r + g * support.atoms, support.v_min, support.v_max)
    b = (tz - support.v_min) / support.delta_z
    # snap round-off so values that sit on an atom (e.g. the identity backup) stay exact
    nearest = np.round(b)
    b = np.where(np.abs(b - nearest) < 1e-9, nearest, b)
    lower = np.clip(np.floor(b), 0, N - 1).astype(np.int64)
    upper_w = b - lower
    # the top atom has no right neighbour; its fractional part is zero after clipping
    upper = np.minimum(lower + 1, N - 1)
    out = np.zeros_like(p)
    rows = np.repeat(np.arange(n), N).reshape(n, N)
    np.add.at(out, (rows, lower), p * (1.0 - upper_w))
    np.add.at(out, (rows, upper), p * upper_w)
    return out[0] if single else out


def cross_entropy_loss(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of ``-sum_i target_i log softmax(logits)_i`` and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    logp = log_softmax(logits)
    if logits.ndim == 1:
        return float(-(target * logp).sum()), np.exp(logp) - target
    n = logits.shape[0]
    loss = float(-(target * logp).sum() / n)
    return loss, (np.exp(logp) - target) / n
