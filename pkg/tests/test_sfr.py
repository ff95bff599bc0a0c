import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sanetkit.backbone import BackboneConfig
from sanetkit.errors import DimensionError
from sanetkit.gradcheck import check_gradients, projection_loss
from sanetkit.sfr import SFR, attention_map, spatial_function
from sanetkit.tensor import Tensor


def brute_force_spatial(x):
    """Explicit sums: out[c, j] = sum_i x[c, i] * softmax_i(sum_c' x[c', j] * x[c', i])."""
    n, c, h, w = x.shape
    hw = h * w
    flat = x.reshape(n, c, hw)
    out = np.zeros_like(flat)
    for s in range(n):
        for j in range(hw):
            logits = [sum(flat[s, k, j] * flat[s, k, i] for k in range(c)) for i in range(hw)]
            m = max(logits)
            e = [np.exp(v - m) for v in logits]
            z = sum(e)
            for ch in range(c):
                out[s, ch, j] = sum(flat[s, ch, i] * e[i] / z for i in range(hw))
    return out.reshape(n, c, h, w)


def test_spatial_function_matches_brute_force():
    x = np.random.default_rng(0).standard_normal((1, 4, 3, 3))
    got = spatial_function(Tensor(x)).numpy()
    np.testing.assert_allclose(got, brute_force_spatial(x), rtol=0, atol=1e-10)


def test_single_position_is_identity():
    x = np.random.default_rng(1).standard_normal((2, 5, 1, 1))
    np.testing.assert_array_equal(attention_map(Tensor(x)).numpy(), np.ones((2, 1, 1)))
    np.testing.assert_allclose(spatial_function(Tensor(x)).numpy(), x, rtol=0, atol=0)


def test_constant_map_is_fixed_point():
    x = np.full((1, 3, 4, 4), 0.7)
    a = attention_map(Tensor(x)).numpy()
    np.testing.assert_allclose(a, 1 / 16, atol=1e-15)
    np.testing.assert_allclose(spatial_function(Tensor(x)).numpy(), 0.7, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_attention_rows_are_stochastic(h, w, c, seed):
    x = np.random.default_rng(seed).uniform(-10, 10, (1, c, h, w))
    rows = attention_map(Tensor(x)).numpy().sum(axis=-1)
    assert np.abs(rows - 1).max() <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_spatial_function_permutation_equivariant(h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 3, h, w))
    perm = rng.permutation(h * w)
    xp = x.reshape(1, 3, -1)[:, :, perm].reshape(x.shape)
    out = spatial_function(Tensor(x)).numpy().reshape(1, 3, -1)[:, :, perm]
    np.testing.assert_allclose(spatial_function(Tensor(xp)).numpy().reshape(1, 3, -1), out, atol=1e-12)


def test_branch_shapes_desk():
    sfr = SFR(128, 32)
    x1, x2 = sfr.branches(Tensor(np.zeros((2, 128, 8, 8))))
    assert x1.shape == (2, 32, 8, 8) and x2.shape == (2, 32, 4, 4)
    assert x1.shape[-1] == 2 * x2.shape[-1]


def test_branch_configuration():
    sfr = SFR(128, 32)
    assert (sfr.branch1_conv.kernel_size, sfr.branch1_conv.stride) == (1, 1)
    assert (sfr.branch2_conv.kernel_size, sfr.branch2_conv.stride, sfr.branch2_conv.padding) == (3, 2, 1)


def test_full_width_channels():
    cfg = BackboneConfig.full_width()
    sfr = SFR(cfg.out_channels, 256)
    assert sfr.branch1_conv.weight.shape == (256, 2048, 1, 1)


def test_full_width_output_shape():
    # C=2048 -> C'=256 at ResBlock4's 1/16 grid of a 64x64 image
    sfr = SFR(2048, 256, rng=np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).uniform(0, 0.01, (1, 2048, 4, 4)))
    assert sfr(x).shape == (1, 256, 4, 4)


def test_odd_size_rejected():
    with pytest.raises(DimensionError):
        SFR(8, 4).branches(Tensor(np.zeros((1, 8, 5, 4))))


def test_alpha_init_and_range():
    sfr = SFR(8, 4)
    assert sfr.alpha == 0.5
    assert sfr.alpha_logit.decay_exempt
    sfr.alpha_logit.data[0] = 50.0
    assert 0 < sfr.alpha <= 1


def test_alpha_endpoint_selects_first_branch():
    rng = np.random.default_rng(2)
    sfr = SFR(8, 4, rng=rng)
    x = Tensor(rng.standard_normal((1, 8, 4, 4)))
    sfr.alpha_logit.data[0] = 20.0
    f1 = spatial_function(sfr.branches(x)[0]).numpy()
    out = sfr(x).numpy()
    assert np.abs(out - f1).max() <= 1e-6 * max(1.0, np.abs(f1).max())


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 2), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_output_shape_contract(n, hh, ww, seed):
    rng = np.random.default_rng(seed)
    sfr = SFR(6, 3, rng=rng)
    out = sfr(Tensor(rng.standard_normal((n, 6, 2 * hh, 2 * ww))))
    assert out.shape == (n, 3, 2 * hh, 2 * ww)


def test_sfr_full_module_gradients():
    rng = np.random.default_rng(3)
    sfr = SFR(16, 8, rng=rng)
    sfr.alpha_logit.data[0] = 0.4
    sfr.theta_deconv.weight.data += 0.1 * rng.uniform(-1, 1, sfr.theta_deconv.weight.shape)
    x = Tensor(rng.uniform(-1, 1, (1, 16, 8, 8)), requires_grad=True)
    w = rng.uniform(-1, 1, (1, 8, 8, 8))
    res = check_gradients(lambda: projection_loss(sfr(x), w), [("x", x)] + list(sfr.named_parameters()), rng=rng)
    assert all(r.passed for r in res), [r.line() for r in res if not r.passed]
    names = {r.name for r in res}
    assert {"branch1_conv.weight", "branch2_conv.weight", "theta_deconv.weight", "alpha_logit"} <= names
