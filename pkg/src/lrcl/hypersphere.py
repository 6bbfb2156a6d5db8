"""Unit-norm weight rows, plain and LoRA-compatible.

Plain row normalization rescales the whole row. With a frozen LoRA base
that would also rescale the base, so instead each row solves for a scalar
``s`` with ``||w + s * delta|| = 1`` and folds ``s`` into the matching row
of ``B``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linear import LoRALinear

DEGENERATE_TOL = 1e-12
DISCRIMINANT_TOL = 1e-14


class ProjectionError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


@dataclass(frozen=True)
class ProjectionConfig:
    eps: float = 1e-8
    enabled: bool = True

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


def row_normalize(W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    norms = np.linalg.norm(W, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms.reshape(-1) == 0.0)[0])
        raise ProjectionError("cannot normalize a zero row", bad)
    return W / norms


def scale_quadratic(w: np.ndarray, delta: np.ndarray) -> tuple[float, float, float]:
    """Coefficients ``(a, b, c)`` of ``a s^2 + b s + c = 0`` for ``||w + s delta||^2 = 1``."""
    return float(delta @ delta), float(2.0 * (w @ delta)), float(w @ w - 1.0)


def scale_roots(w: np.ndarray, delta: np.ndarray, eps: float = 1e-8) -> tuple[float, float]:
    """Both roots ``(s_plus, s_minus)`` in closed form, denominator clamped by ``eps``."""
    w = np.asarray(w, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    dd = float(delta @ delta)
    wd = float(w @ delta)
    disc = wd * wd - dd * (float(w @ w) - 1.0)
    if disc < 0.0:
        if disc < -DISCRIMINANT_TOL:
            raise ProjectionError(f"negative discriminant {disc:.3e}")
        disc = 0.0
    root = np.sqrt(disc)
    denom = max(dd, eps)
    return (-wd + root) / denom, (-wd - root) / denom


def solve_row_scale(w, delta, cfg: ProjectionConfig = ProjectionConfig()) -> float:
    """Positive ``s`` with ``||w + s delta||_2 = 1``; needs ``||w|| < 1`` and ``delta != 0``."""
    w = np.asarray(w, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.linalg.norm(delta) <= DEGENERATE_TOL:
        raise ProjectionError("update direction is (numerically) zero")
    if np.linalg.norm(w) >= 1.0:
        raise ProjectionError(f"base row norm {np.linalg.norm(w):.6f} is not below 1")
    s_plus, _ = scale_roots(w, delta, cfg.eps)
    return s_plus


def project_lora(m: LoRALinear, cfg: ProjectionConfig = ProjectionConfig()) -> LoRALinear:
    """Rescale rows of ``B`` in place so every effective row has unit norm.

    The base is left untouched. Returns the per-row scales via ``m.last_scales``.
    """
    if not cfg.enabled:
        return m
    W0 = m.base.value
    delta = m.delta()
    scales = np.empty(W0.shape[0])
    for j in range(W0.shape[0]):
        try:
            scales[j] = solve_row_scale(W0[j], delta[j], cfg)
        except ProjectionError as exc:
            raise ProjectionError(str(exc), j) from None
    m.B.value *= scales[:, None]
    m.last_scales = scales
    return m


@dataclass(frozen=True)
class IncompatibilityReport:
    c: float
    base_after_naive: np.ndarray
    base_after_ours: np.ndarray
    effective_after_naive: np.ndarray
    effective_after_ours: np.ndarray

    @property
    def naive_moves_base(self) -> bool:
        return self.c != 1.0


def demonstrate_incompatibility(w, delta, eps: float = 1e-8) -> IncompatibilityReport:
    """Contrast plain normalization of ``w + delta`` with the base-preserving projection.

    Plain normalization divides the whole row by ``||w + delta|| + eps``, so the
    base component becomes ``c * w``. The projection keeps ``w`` and scales only
    ``delta``.
    """
    w = np.asarray(w, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    total = w + delta
    n = np.linalg.norm(total)
    if n == 0.0:
        raise ProjectionError("w + delta is the zero vector")
    c = 1.0 / (n + eps)
    s = solve_row_scale(w, delta, ProjectionConfig(eps=eps))
    return IncompatibilityReport(
        c=c,
        base_after_naive=c * w,
        base_after_ours=w.copy(),
        effective_after_naive=c * total,
        effective_after_ours=w + s * delta,
    )
