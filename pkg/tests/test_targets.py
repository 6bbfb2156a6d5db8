import numpy as np
import pytest
from hypothesis import given, strategies as st

from lrcl.targets import TargetInputs, sac_target, smoothing_noise, td3_smoothed_action, td3_target


def test_sac_plain_backup():
    assert sac_target(TargetInputs(reward=1, discount=0.5, q_agg=2)) == 2.0


def test_sac_terminal():
    assert sac_target(TargetInputs(reward=0.3, discount=0.9, q_agg=100, mask=0)) == 0.3


def test_sac_entropy_term():
    t = TargetInputs(reward=0, discount=0.97, q_agg=1, alpha_ent=0.1, logp=-2)
    assert sac_target(t) == pytest.approx(1.164, abs=1e-12)


def test_td3_target():
    assert td3_target(TargetInputs(reward=1, discount=0.9, q_agg=5, mask=0)) == 1
    assert td3_target(TargetInputs(reward=1, discount=0.5, q_agg=4, n=2)) == 2.0


def test_invalid_inputs():
    with pytest.raises(ValueError):
        TargetInputs(reward=0, discount=0.0, q_agg=0)
    with pytest.raises(ValueError):
        TargetInputs(reward=0, discount=0.9, q_agg=0, mask=0.5)
    with pytest.raises(ValueError):
        TargetInputs(reward=0, discount=0.9, q_agg=0, n=0)


def test_smoothed_action_cases():
    np.testing.assert_array_equal(td3_smoothed_action([0.2, 1.5], [0, 0], 0.5, -1, 1), [0.2, 1.0])
    assert td3_smoothed_action(0.0, 0.7, 0.5, -1, 1) == 0.5
    assert td3_smoothed_action(0.9, 0.3, 0.5, -1, 1) == 1.0
    with pytest.raises(ValueError):
        td3_smoothed_action(0.0, 0.0, 0.0, -1, 1)
    with pytest.raises(ValueError):
        td3_smoothed_action(0.0, 0.0, 0.5, 1, -1)


def test_smoothing_noise_seeded():
    a = smoothing_noise(np.random.default_rng(0), (3,), 0.2)
    b = smoothing_noise(np.random.default_rng(0), (3,), 0.2)
    np.testing.assert_array_equal(a, b)


finite = st.floats(-100, 100)


@given(finite, st.floats(0.01, 1.0), finite, st.integers(1, 5), st.sampled_from([0, 1]), finite)
def test_sac_reduces_to_td3(r, g, q, n, m, logp):
    t = TargetInputs(r, g, q, n, m, 0.0, logp)
    assert sac_target(t) == td3_target(t)


@given(finite, st.floats(0.01, 1.0), finite, finite, st.floats(0, 1), finite)
def test_monotone_in_q(r, g, q1, q2, alpha, logp):
    lo, hi = sorted((q1, q2))
    assert td3_target(TargetInputs(r, g, lo)) <= td3_target(TargetInputs(r, g, hi))
    assert (sac_target(TargetInputs(r, g, lo, alpha_ent=alpha, logp=logp))
            <= sac_target(TargetInputs(r, g, hi, alpha_ent=alpha, logp=logp)))
