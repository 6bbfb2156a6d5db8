import numpy as np
import pytest
from hypothesis import given, strategies as st

from lrcl.linear import (
    DenseLinear,
    LoRAInit,
    LoRALinear,
    PrunedLinear,
    apply,
    build_frozen_base,
    build_prune_mask,
    load_snapshot,
    save_snapshot,
)
from lrcl.optim import make_optimizer


def lora(rng, d_out=5, d_in=4, r=2, alpha=None, zero_b=False):
    W0 = rng.normal(size=(d_out, d_in))
    A = rng.normal(size=(r, d_in))
    B = np.zeros((d_out, r)) if zero_b else rng.normal(size=(d_out, r))
    return LoRALinear(W0, A, B, alpha=alpha)


def test_zero_b_effective_weight_is_base(rng):
    m = lora(rng, zero_b=True)
    np.testing.assert_array_equal(m.effective_weight(), m.base.value)


def test_default_alpha_gives_unit_scaling(rng):
    m = lora(rng, r=3)
    assert m.alpha == 3 and m.scaling == 1.0
    np.testing.assert_allclose(m.effective_weight(), m.base.value + m.B.value @ m.A.value)


def test_outer_product_case():
    m = LoRALinear(np.zeros((2, 2)), np.array([[1.0, 0.0]]), np.array([[2.0], [0.0]]), alpha=1.0)
    np.testing.assert_array_equal(m.delta(), [[2.0, 0.0], [0.0, 0.0]])


def test_alpha_scaling(rng):
    m = lora(rng, r=4, alpha=2.0)
    np.testing.assert_allclose(m.delta(), 0.5 * m.B.value @ m.A.value)


def test_shape_mismatch(rng):
    with pytest.raises(ValueError):
        LoRALinear(np.zeros((3, 4)), np.zeros((2, 5)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        apply(DenseLinear(np.eye(3)), np.ones(4))


def test_apply_trivial_cases(rng):
    m = lora(rng, zero_b=True)
    np.testing.assert_array_equal(apply(m, np.zeros(4)), np.zeros(5))
    x = rng.normal(size=4)
    np.testing.assert_array_equal(apply(m, x), apply(DenseLinear(m.base.value), x))
    ident = LoRALinear(np.eye(3), rng.normal(size=(1, 3)), np.zeros((3, 1)))
    np.testing.assert_array_equal(apply(ident, x[:3]), x[:3])


def test_batch_forward_matches_effective_weight(rng):
    m = lora(rng)
    X = rng.normal(size=(7, 4))
    np.testing.assert_allclose(m.forward(X), X @ m.effective_weight().T, rtol=1e-12, atol=1e-12)


def test_pruned_apply(rng):
    W = rng.normal(size=(4, 6))
    mask = build_prune_mask(4, 6, 0.5, rng)
    m = PrunedLinear(W, mask)
    x = rng.normal(size=6)
    np.testing.assert_allclose(apply(m, x), (W * mask) @ x)
    assert m.sparsity == pytest.approx(0.5)


@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 3),
       st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_linearity(d_out, d_in, r, a, b, seed):
    rng = np.random.default_rng(seed)
    m = LoRALinear(rng.normal(size=(d_out, d_in)), rng.normal(size=(r, d_in)),
                   rng.normal(size=(d_out, r)))
    x, y = rng.normal(size=d_in), rng.normal(size=d_in)
    lhs = apply(m, a * x + b * y)
    rhs = a * apply(m, x) + b * apply(m, y)
    scale = max(1.0, np.max(np.abs(lhs)))
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * scale


def test_frozen_base_full_rank_rows(rng):
    W = build_frozen_base(16, 8, kappa=0.5, rng=rng)
    np.testing.assert_allclose(np.linalg.norm(W, axis=1), 0.5, atol=1e-10)
    assert np.linalg.matrix_rank(W) == 8


def test_frozen_base_square_is_orthogonal_before_rescale(rng):
    W = build_frozen_base(8, 8, rng=rng, rescale=False)
    assert np.max(np.abs(W.T @ W - np.eye(8))) <= 1e-8


@pytest.mark.parametrize("d_out,d_in", [(8, 5), (5, 8)])
def test_semi_orthogonal_rectangular(rng, d_out, d_in):
    W = build_frozen_base(d_out, d_in, rng=rng, rescale=False)
    small = min(d_out, d_in)
    G = W.T @ W if d_out >= d_in else W @ W.T
    assert np.max(np.abs(G - np.eye(small))) <= 1e-8


@pytest.mark.parametrize("k", [1, 2, 5])
def test_frozen_base_rank(rng, k):
    W = build_frozen_base(10, 8, base_rank=k, kappa=0.5, rng=rng)
    sv = np.linalg.svd(W, compute_uv=False)
    assert np.all(sv[k:] < 1e-10 * sv[0])
    assert sv[k - 1] > 1e-6 * sv[0]
    np.testing.assert_allclose(np.linalg.norm(W, axis=1), 0.5, atol=1e-10)
    if k == 1:
        U = W / np.linalg.norm(W, axis=1, keepdims=True)
        np.testing.assert_allclose(np.abs(U @ U.T), 1.0, atol=1e-10)


def test_frozen_base_invalid(rng):
    with pytest.raises(ValueError):
        build_frozen_base(4, 4, base_rank=5, rng=rng)
    with pytest.raises(ValueError):
        build_frozen_base(4, 4, kappa=1.0, rng=rng)


def test_prune_mask():
    rng = np.random.default_rng(0)
    assert build_prune_mask(4, 5, 0.0, rng).all()
    m = build_prune_mask(64, 64, 0.85, np.random.default_rng(1))
    assert abs((~m).sum() - 0.85 * m.size) <= 1
    np.testing.assert_array_equal(m, build_prune_mask(64, 64, 0.85, np.random.default_rng(1)))
    with pytest.raises(ValueError):
        build_prune_mask(2, 2, 1.0, rng)


def test_lora_init_modes(rng):
    A, B = LoRAInit("zero-b").sample(rng, 4, 64, 256)
    assert np.all(B == 0)
    assert A.std() == pytest.approx(1 / 16, rel=0.05)
    a_std, b_std = LoRAInit("normal-both").stds(4, 100, 30)
    assert a_std == pytest.approx(0.5) and b_std == pytest.approx(0.1)
    A, B = LoRAInit("normal-both").sample(rng, 4, 100, 30)
    assert np.any(B @ A != 0)
    with pytest.raises(ValueError):
        LoRAInit("kaiming")


def test_base_frozen_under_training(rng):
    m = lora(rng, 6, 5, 2, zero_b=True)
    base0 = m.base.value.copy()
    opt = make_optimizer(m, lr=1e-2)
    X = rng.normal(size=(16, 5))
    Y = rng.normal(size=(16, 6))
    for _ in range(120):
        opt.zero_grad()
        m.backward(m.forward(X) - Y)
        opt.step()
    np.testing.assert_array_equal(m.base.value, base0)
    assert not m.base.value.flags.writeable
    assert np.any(m.B.value != 0)


def test_pruned_mask_survives_updates(rng):
    mask = build_prune_mask(6, 5, 0.6, rng)
    m = PrunedLinear(rng.normal(size=(6, 5)), mask)
    opt = make_optimizer(m, lr=1e-2)
    X, Y = rng.normal(size=(16, 5)), rng.normal(size=(16, 6))
    for _ in range(100):
        opt.zero_grad()
        m.backward(m.forward(X) - Y)
        opt.step()
    assert np.all(m.weight.value[~mask] == 0.0)


def test_snapshot_round_trip(tmp_path, rng):
    m = lora(rng)
    path = tmp_path / "snap.npz"
    save_snapshot(path, m)
    other = lora(np.random.default_rng(99))
    load_snapshot(path, other)
    for (n1, p1), (n2, p2) in zip(m.named_params(), other.named_params()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.value, p2.value)
    assert not other.base.value.flags.writeable
    with pytest.raises(ValueError):
        load_snapshot(path, lora(rng, d_out=6))
