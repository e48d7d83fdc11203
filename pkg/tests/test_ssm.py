"""State-space math: ZOH values, scan/convolution duality, parallel-sequential
equivalence, stability, and the continuous-time RK4 oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stsmcd import ssm


def test_zoh_matches_high_precision_scalar():
    a_bar, b_bar = ssm.zoh_discretize(-1.0, 1.0, 0.1)
    assert a_bar == pytest.approx(0.9048374, abs=1e-7)
    assert b_bar == pytest.approx(0.0951626, abs=1e-7)


def test_zoh_zero_a_limit():
    a_bar, b_bar = ssm.zoh_discretize(0.0, 1.0, 0.1)
    assert a_bar == pytest.approx(1.0)
    assert b_bar == pytest.approx(0.1)


def test_zoh_small_delta_approaches_identity():
    a_bar, b_bar = ssm.zoh_discretize(-2.0, 3.0, 1e-12)
    assert a_bar == pytest.approx(1.0, abs=1e-10)
    assert b_bar == pytest.approx(0.0, abs=1e-10)


def test_zoh_rejects_nonpositive_delta():
    with pytest.raises(ValueError):
        ssm.zoh_discretize(-1.0, 1.0, 0.0)


def test_memoryless_recurrence():
    d = ssm.DiscreteSsm(a_bar=np.zeros(1), b_bar=np.ones(1))
    y = ssm.lti_recurrent_scan(d, np.ones(1), np.array([5.0, 7.0]))
    assert np.allclose(y, [5.0, 7.0])


def test_cumulative_sum_recurrence():
    d = ssm.DiscreteSsm(a_bar=np.ones(1), b_bar=np.ones(1))
    y = ssm.lti_recurrent_scan(d, np.ones(1), np.array([1.0, 1.0, 1.0]))
    assert np.allclose(y, [1.0, 2.0, 3.0])


def test_empty_sequence_rejected():
    d = ssm.DiscreteSsm(a_bar=np.ones(1), b_bar=np.ones(1))
    with pytest.raises(ValueError):
        ssm.lti_recurrent_scan(d, np.ones(1), np.array([]))


def test_kernel_powers():
    d = ssm.DiscreteSsm(a_bar=np.array([0.5]), b_bar=np.array([1.0]))
    k = ssm.lti_conv_kernel(d, np.ones(1), 3)
    assert np.allclose(k, [1.0, 0.5, 0.25])


def test_kernel_zero_decay_is_impulse():
    d = ssm.DiscreteSsm(a_bar=np.zeros(2), b_bar=np.array([1.0, 2.0]))
    k = ssm.lti_conv_kernel(d, np.array([3.0, 1.0]), 4)
    assert np.allclose(k, [5.0, 0.0, 0.0, 0.0])


def test_kernel_all_ones_matches_cumsum_scan():
    d = ssm.DiscreteSsm(a_bar=np.ones(1), b_bar=np.ones(1))
    assert np.allclose(ssm.lti_conv_kernel(d, np.ones(1), 5), np.ones(5))


def test_kernel_length_validation():
    d = ssm.DiscreteSsm(a_bar=np.ones(1), b_bar=np.ones(1))
    with pytest.raises(ValueError):
        ssm.lti_conv_kernel(d, np.ones(1), 0)


def test_conv_identity_kernel():
    y = ssm.lti_conv_apply(np.array([1.0, 0.0, 0.0]), np.array([4.0, 5.0, 6.0]))
    assert np.allclose(y, [4.0, 5.0, 6.0])


def test_conv_ones_kernel_is_cumsum():
    y = ssm.lti_conv_apply(np.ones(3), np.ones(3))
    assert np.allclose(y, [1.0, 2.0, 3.0])


def test_conv_length_mismatch():
    with pytest.raises(ValueError):
        ssm.lti_conv_apply(np.ones(3), np.ones(4))


def _random_stable(rng, n):
    a = -np.abs(rng.normal(1.0, 0.8, size=n)) - 0.05
    b = rng.normal(size=n)
    c = rng.normal(size=n)
    delta = float(rng.uniform(0.05, 0.8))
    return a, b, c, delta


def test_scan_conv_duality_random():
    rng = np.random.default_rng(17)
    for _ in range(25):
        a, b, c, delta = _random_stable(rng, 3)
        d = ssm.discretize_diag(a, b, delta)
        x = rng.normal(size=16)
        y_scan = ssm.lti_recurrent_scan(d, c, x)
        y_conv = ssm.lti_conv_apply(ssm.lti_conv_kernel(d, c, 16), x)
        assert np.abs(y_scan - y_conv).max() <= 1e-10


def test_selective_constant_params_match_lti():
    rng = np.random.default_rng(3)
    a, b, c, delta = _random_stable(rng, 4)
    L, D = 24, 1
    x = rng.normal(size=(L, D))
    si = ssm.SelectiveInputs(
        x=x,
        delta=np.full((L, D), delta),
        b=np.tile(b, (L, 1)),
        c=np.tile(c, (L, 1)),
    )
    y_sel = ssm.selective_scan_sequential(si, a[None, :], mode="zoh")
    d = ssm.discretize_diag(a, b, delta)
    y_lti = ssm.lti_recurrent_scan(d, c, x[:, 0])
    assert np.abs(y_sel[:, 0] - y_lti).max() <= 1e-10


def test_selective_euler_tiny_delta_is_zero():
    rng = np.random.default_rng(4)
    L, D, N = 6, 2, 3
    si = ssm.SelectiveInputs(
        x=rng.normal(size=(L, D)),
        delta=np.full((L, D), 1e-300),
        b=rng.normal(size=(L, N)),
        c=rng.normal(size=(L, N)),
    )
    y = ssm.selective_scan_sequential(si, -np.ones((D, N)), mode="euler")
    assert np.abs(y).max() <= 1e-290


def test_selective_single_step():
    rng = np.random.default_rng(5)
    D, N = 3, 2
    si = ssm.SelectiveInputs(
        x=rng.normal(size=(1, D)),
        delta=rng.uniform(0.1, 0.5, size=(1, D)),
        b=rng.normal(size=(1, N)),
        c=rng.normal(size=(1, N)),
    )
    a = -np.abs(rng.normal(size=(D, N)))
    y = ssm.selective_scan_sequential(si, a, mode="euler")
    expected = ((si.delta[0, :, None] * si.b[0][None, :] * si.x[0, :, None]) @ si.c[0])
    assert np.allclose(y[0], expected)


def test_selective_rejects_nonpositive_delta():
    si = ssm.SelectiveInputs(
        x=np.ones((2, 1)), delta=np.zeros((2, 1)), b=np.ones((2, 1)), c=np.ones((2, 1))
    )
    with pytest.raises(ValueError):
        ssm.selective_scan_sequential(si, -np.ones((1, 1)))


def test_parallel_cumsum_configuration():
    L = 9
    si = ssm.SelectiveInputs(
        x=np.arange(1.0, L + 1)[:, None],
        delta=np.ones((L, 1)),
        b=np.ones((L, 1)),
        c=np.ones((L, 1)),
    )
    a = np.array([[-1e-15]])  # decay ~ 1, euler b_bar = delta * b = 1
    y = ssm.selective_scan_parallel(si, a, mode="euler")
    assert np.allclose(y[:, 0], np.cumsum(np.arange(1.0, L + 1)), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(
    length=st.integers(min_value=1, max_value=2048),
    d=st.integers(min_value=1, max_value=8),
    n=st.integers(min_value=1, max_value=8),
    mode=st.sampled_from(["euler", "zoh"]),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
def test_parallel_equals_sequential(length, d, n, mode, seed):
    rng = np.random.default_rng(seed)
    si = ssm.SelectiveInputs(
        x=rng.normal(size=(length, d)),
        delta=rng.uniform(0.01, 0.9, size=(length, d)),
        b=rng.normal(size=(length, n)),
        c=rng.normal(size=(length, n)),
        skip=rng.normal(size=d),
    )
    a = -np.abs(rng.normal(size=(d, n))) - 0.01
    y_seq = ssm.selective_scan_sequential(si, a, mode=mode)
    y_par = ssm.selective_scan_parallel(si, a, mode=mode)
    assert np.abs(y_seq - y_par).max() <= 1e-9


def test_zoh_fidelity_against_rk4():
    rng = np.random.default_rng(23)
    for _ in range(8):
        a = float(-np.abs(rng.normal(1.0, 0.5)) - 0.1)
        b = float(rng.normal())
        c = float(rng.normal())
        delta = float(rng.uniform(0.05, 0.5))
        x = rng.normal(size=32)
        d = ssm.discretize_diag(np.array([a]), np.array([b]), delta)
        y_disc = ssm.lti_recurrent_scan(d, np.array([c]), x)
        y_ode = ssm.rk4_reference(a, b, c, x, delta, substeps=100)
        scale = np.abs(y_ode).max() + 1e-12
        assert np.abs(y_disc - y_ode).max() / scale <= 1e-4


def test_stability_bound():
    rng = np.random.default_rng(29)
    a = -np.abs(rng.normal(1.0, 0.5, size=4)) - 0.05
    b = rng.normal(size=4)
    delta = 0.3
    d = ssm.discretize_diag(a, b, delta)
    x = rng.uniform(-1.0, 1.0, size=200)
    h = np.zeros(4)
    max_a = np.abs(d.a_bar).max()
    bound = np.linalg.norm(d.b_bar) * np.abs(x).max() / (1.0 - max_a)
    for xt in x:
        h = d.a_bar * h + d.b_bar * xt
        assert np.abs(h).max() <= bound + 1e-9
