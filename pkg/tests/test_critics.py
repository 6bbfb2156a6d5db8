import numpy as np
import pytest
from hypothesis import given, strategies as st

from lrcl.checks import gradient_cases, gradient_check
from lrcl.critics import (
    ParamRegistry,
    build_bro_critic,
    build_simba_critic,
    build_toy_critic,
    lora_wrap,
    prune_wrap,
)
from lrcl.linear import LoRAInit, LoRALinear, PrunedLinear
from lrcl.optim import make_optimizer


@pytest.fixture(scope="module")
def toy():
    return build_toy_critic(64, 256, seed=0)


def test_toy_zero_input(toy):
    assert toy.forward(np.zeros(64)) == 0.0


def test_toy_matches_formula(toy, rng):
    phi = rng.uniform(-1, 1, size=64)
    W0, W1 = toy.layer0.weight.value, toy.layer1.weight.value
    ref = toy.w_out.value @ np.maximum(W1 @ np.maximum(W0 @ phi, 0), 0)
    assert toy.forward(phi) == pytest.approx(ref, rel=1e-12)


def test_toy_output_linear_in_readout(rng):
    c = build_toy_critic(64, 32, seed=1)
    phi = rng.uniform(-1, 1, size=64)
    q = c.forward(phi)
    c.w_out.value *= 2
    assert c.forward(phi) == pytest.approx(2 * q, rel=1e-12)


def test_zero_b_twin_matches_dense(toy, rng):
    twin = lora_wrap(toy, 4, LoRAInit("zero-b"), seed=0)
    X = rng.uniform(-1, 1, size=(10, 64))
    assert np.max(np.abs(twin.forward(X) - toy.forward(X))) <= 1e-12


def test_toy_shape_check(toy):
    with pytest.raises(ValueError):
        toy.forward(np.zeros(10))


def test_toy_wrap_targets(toy):
    w = lora_wrap(toy, 2, seed=0)
    assert isinstance(w.layer0, LoRALinear) and isinstance(w.layer1, LoRALinear)
    reg = ParamRegistry(w)
    assert reg.group("w_out") == "base"
    assert set(reg.names("frozen")) == {"layer0.base", "layer1.base"}


@pytest.mark.parametrize("r", [1, 2, 8])
def test_toy_lora_trainable_count(toy, r):
    D, H = 64, 256
    reg = ParamRegistry(lora_wrap(toy, r, seed=0))
    assert reg.count(trainable=True) == r * (D + H) + r * (H + H) + H


def test_nobase_is_product(toy, rng):
    w = lora_wrap(toy, 3, LoRAInit("normal-both"), base="none", seed=0)
    for m in w.maps():
        assert np.all(m.base.value == 0)
        np.testing.assert_allclose(m.effective_weight(), m.B.value @ m.A.value)
    zero = lora_wrap(toy, 3, LoRAInit("zero-b"), base="none", seed=0)
    assert np.all(zero.forward(rng.uniform(-1, 1, size=(5, 64))) == 0)


def test_rank_too_large(toy):
    with pytest.raises(ValueError):
        lora_wrap(toy, 257, seed=0)


def test_prune_wrap(toy):
    p = prune_wrap(toy, 0.85, seed=0)
    for m in p.maps():
        assert isinstance(m, PrunedLinear)
        assert abs((~m.mask).sum() - 0.85 * m.mask.size) <= 1


def test_simba_unit_norm_states(rng):
    c = build_simba_critic(10, 64, 2, seed=0)
    c.forward(rng.normal(size=(7, 10)))
    assert len(c.hidden_states) == 3
    for h in c.hidden_states:
        assert np.max(np.abs(np.linalg.norm(h, axis=1) - 1)) <= 1e-10


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(0.01, 10))
def test_simba_unit_norm_any_params(seed, beta, scale):
    rng = np.random.default_rng(seed)
    c = build_simba_critic(6, 16, 2, num_atoms=5, seed=seed % 1000)
    for b in c.blocks:
        b.beta.value[...] = rng.uniform(0, 1, size=16) * beta
        b.scale.scale.value[...] = scale
    c.forward(rng.normal(size=(4, 6)) * 10)
    for h in c.hidden_states:
        assert np.max(np.abs(np.linalg.norm(h, axis=1) - 1)) <= 1e-10


def test_simba_lerp_extremes(rng):
    c = build_simba_critic(10, 32, 1, seed=0)
    x = rng.normal(size=(3, 10))
    c.blocks[0].beta.value[...] = 0.0
    c.forward(x)
    np.testing.assert_allclose(c.hidden_states[1], c.hidden_states[0], atol=1e-15)
    c.blocks[0].beta.value[...] = 1.0
    c.forward(x)
    np.testing.assert_allclose(c.hidden_states[1], c.blocks[0]._ht, atol=1e-15)


def test_simba_wraps_two_maps_per_block():
    c = lora_wrap(build_simba_critic(10, 64, 2, seed=0), 8, seed=0)
    assert len(c.maps()) == 4
    assert all(isinstance(m, LoRALinear) for m in c.maps())
    reg = ParamRegistry(c)
    assert reg.group("embed.weight") == "base" and reg.group("head.weight") == "base"
    assert reg.group("blocks.0.beta") == "base"


def test_simba_lora_fewer_trainable():
    dense = build_simba_critic(10, 64, 2, seed=0)
    wrapped = lora_wrap(dense, 8, seed=0)
    assert ParamRegistry(wrapped).count(trainable=True) < ParamRegistry(dense).count(trainable=True)


def test_simba_rejects_nonfinite():
    c = build_simba_critic(3, 8, 1, seed=0)
    with pytest.raises(FloatingPointError):
        c.forward(np.array([np.inf, 0, 0]))


def test_bro_layer_norm_statistics(rng):
    c = build_bro_critic(10, 64, 2, seed=0)
    c.forward(rng.normal(size=(9, 10)) * 5)
    for ln in [c.ln_in] + [getattr(b, n) for b in c.blocks for n in ("ln1", "ln2")]:
        xhat = ln._xhat
        assert np.max(np.abs(xhat.mean(axis=1))) <= 1e-10
        # the variance of the normalized features is var / (var + eps), not exactly 1
        raw_var = ln._std[:, 0] ** 2 - ln.eps
        np.testing.assert_allclose(xhat.var(axis=1), raw_var / (raw_var + ln.eps), atol=1e-8)


def test_bro_residual_identity(rng):
    c = build_bro_critic(10, 32, 2, seed=0)
    for b in c.blocks:
        b.w2.weight.value[...] = 0.0
    x = rng.normal(size=(4, 10))
    out = c.forward(x)
    np.testing.assert_allclose(c.hidden_states[-1], c.hidden_states[0], atol=1e-15)
    np.testing.assert_allclose(out, c.head.forward(c.hidden_states[0]), atol=1e-15)


def test_bro_deterministic(rng):
    x = rng.normal(size=(3, 10))
    a = build_bro_critic(10, 32, 2, seed=4).forward(x)
    b = build_bro_critic(10, 32, 2, seed=4).forward(x)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("name", sorted(gradient_cases()))
def test_gradients_match_finite_differences(name):
    critic, x, target, head = gradient_cases()[name]()
    assert gradient_check(critic, x, target, head) <= 1e-5


def test_frozen_base_gets_no_gradient(toy, rng):
    w = lora_wrap(toy, 2, LoRAInit("normal-both"), seed=0)
    w.zero_grad()
    w.backward(w.forward(rng.uniform(-1, 1, size=(5, 64))))
    for m in w.maps():
        assert m.base.grad is None
        assert m.A.grad is not None and m.B.grad is not None


def test_registry_changed_set_is_trainable_set(rng):
    c = lora_wrap(build_simba_critic(6, 16, 2, num_atoms=5, seed=0), 2,
                  LoRAInit("normal-both"), seed=0)
    reg = ParamRegistry(c)
    before = reg.snapshot()
    opt = make_optimizer(c, lr=1e-2)
    opt.zero_grad()
    c.forward(rng.normal(size=(4, 6)))
    c.backward(rng.normal(size=(4, 5)))
    opt.step()
    assert reg.changed(before) == set(reg.trainable_names())
    groups = [reg.group(n) for n in reg.names()]
    assert len(groups) == len(reg.named)
