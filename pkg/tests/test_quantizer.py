import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import toy
from gemq.errors import ConditioningError
from gemq.model import expert_names, forward
from gemq.quantizer import (
    QuantConfig, affine_quantize, apply_allocation, capture_calibration, gptq_quantize,
    reconstruction_error, round_half_away,
)


def hadamard(n):
    h = np.array([[1.0]])
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


def correlated_inputs(rng, n, d):
    mix = rng.normal(size=(d, d)) * (rng.random(d) ** 3)[None, :]
    return rng.normal(size=(n, d)) @ mix + 0.05 * rng.normal(size=(n, d))


def test_round_half_away_from_zero():
    np.testing.assert_array_equal(round_half_away(np.array([0.5, -0.5, 1.5, 2.5, -2.5, 0.49])),
                                  [1, -1, 2, 3, -3, 0])


def test_two_bit_reference_row():
    qm = affine_quantize(np.array([[0.0, 0.5, 1.0]]), QuantConfig(2))
    assert qm.scales[0, 0] == pytest.approx(1 / 3, rel=1e-15)
    assert qm.zeros[0, 0] == 0
    assert qm.q.tolist() == [[0, 2, 3]]
    np.testing.assert_allclose(qm.dequantize(), [[0, 2 / 3, 1]], rtol=1e-15)


@pytest.mark.parametrize("c", [2.5, -1.3, 0.0, 1e-7])
@pytest.mark.parametrize("bits", [1, 2, 3, 4])
def test_constant_rows_are_exact(c, bits):
    qm = affine_quantize(np.full((2, 3), c), QuantConfig(bits))
    np.testing.assert_array_equal(qm.dequantize(), np.full((2, 3), c))


@settings(max_examples=60)
@given(st.integers(0, 2**31), st.integers(1, 4), st.sampled_from([None, 1, 3, 5, 16]))
def test_rounding_error_at_most_half_a_step(seed, bits, group):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(16, 16)) * rng.uniform(0.01, 10)
    cfg = QuantConfig(bits, group)
    qm = affine_quantize(w, cfg)
    assert qm.q.max() <= 2**bits - 1 and qm.zeros.max() <= 2**bits - 1
    gs = cfg.group_for(16)
    for g in range(qm.scales.shape[1]):
        sl = slice(g * gs, (g + 1) * gs)
        err = np.abs(w[:, sl] - qm.dequantize()[:, sl]).max(axis=1)
        assert (err <= qm.scales[:, g] / 2 * (1 + 1e-12)).all()
        lo = np.minimum(w[:, sl].min(axis=1), 0) - qm.scales[:, g] / 2
        hi = np.maximum(w[:, sl].max(axis=1), 0) + qm.scales[:, g] / 2
        dq = qm.dequantize()[:, sl]
        assert (dq >= lo[:, None] - 1e-12).all() and (dq <= hi[:, None] + 1e-12).all()


def test_group_count_and_default_group():
    assert QuantConfig(2).group_for(300) == 128
    assert QuantConfig(2).group_for(32) == 32
    qm = affine_quantize(np.ones((2, 300)), QuantConfig(2))
    assert qm.scales.shape == (2, 3)


def test_config_validation():
    for bad in (0, 5):
        with pytest.raises(ValueError):
            QuantConfig(bad)
    with pytest.raises(NotImplementedError):
        QuantConfig(2, act_order=True)


def test_orthogonal_inputs_make_gptq_equal_rtn():
    rng = np.random.default_rng(0)
    x = hadamard(32)  # columns orthogonal with equal norm, so H is a multiple of I
    for bits in (1, 2, 3, 4):
        w = rng.normal(size=(16, 32))
        g, r = gptq_quantize(w, x, QuantConfig(bits)), affine_quantize(w, QuantConfig(bits))
        np.testing.assert_array_equal(g.q, r.q)
        np.testing.assert_array_equal(g.scales, r.scales)


def test_single_column_gptq_is_rtn():
    rng = np.random.default_rng(1)
    w, x = rng.normal(size=(8, 1)), rng.normal(size=(20, 1))
    np.testing.assert_array_equal(gptq_quantize(w, x, QuantConfig(2)).q, affine_quantize(w, QuantConfig(2)).q)


def test_gptq_beats_rtn_on_correlated_inputs():
    rng = np.random.default_rng(2)
    w, x = rng.normal(size=(32, 32)), correlated_inputs(rng, 256, 32)
    cfg = QuantConfig(3)
    e_gptq = reconstruction_error(w, gptq_quantize(w, x, cfg).dequantize(), x)
    e_rtn = reconstruction_error(w, affine_quantize(w, cfg).dequantize(), x)
    assert e_gptq < e_rtn


def test_gptq_is_deterministic():
    rng = np.random.default_rng(3)
    w, x = rng.normal(size=(8, 12)), correlated_inputs(rng, 40, 12)
    a, b = gptq_quantize(w, x, QuantConfig(2, 4)), gptq_quantize(w, x, QuantConfig(2, 4))
    np.testing.assert_array_equal(a.q, b.q)
    np.testing.assert_array_equal(a.scales, b.scales)


def test_gptq_rejects_singular_and_mismatched_inputs():
    with pytest.raises(ConditioningError):
        gptq_quantize(np.ones((2, 3)), np.zeros((5, 3)), QuantConfig(2))
    with pytest.raises(ValueError):
        gptq_quantize(np.ones((2, 3)), np.ones((5, 4)), QuantConfig(2))


# --------------------------------------------------------------------------- model level


def on_grid(rng, shape, scale=0.125):
    """Rows on a 4-bit grid that contain both extreme codes, so the grid is recovered exactly."""
    z = rng.integers(0, 16, size=(shape[0], 1))
    q = rng.integers(0, 16, size=shape)
    q[:, 0], q[:, 1] = 0, 15
    return scale * (q - z)


def test_weights_on_the_four_bit_grid_are_a_fixed_point():
    rng = np.random.default_rng(4)
    m = toy.random_model(0, sharpen=3.0)
    updates = {}
    for i in range(m.config.total_experts):
        for name in expert_names(m.config, i):
            updates[name] = on_grid(rng, m.params()[name].shape)
    m = m.with_params(updates)
    calib = capture_calibration(m, toy.random_windows(m, 16))
    out = apply_allocation(m, [4] * m.config.total_experts, calib).model
    for name, arr in m.params().items():
        np.testing.assert_array_equal(out.params()[name], arr)
    assert out.expert_bits == (4,) * m.config.total_experts


def test_one_bit_everywhere_still_runs():
    m = toy.random_model(1, sharpen=3.0)
    windows = toy.random_windows(m, 8)
    q = apply_allocation(m, [1] * m.config.total_experts, capture_calibration(m, windows)).model
    assert np.isfinite(forward(q, windows[:, :-1]).logits).all()


def test_only_experts_change():
    m = toy.random_model(2, sharpen=3.0)
    windows = toy.random_windows(m, 8)
    q = apply_allocation(m, [1, 2, 3, 1, 2, 3, 1, 2], capture_calibration(m, windows)).model
    for name, arr in m.params().items():
        if ".experts." not in name:
            np.testing.assert_array_equal(q.params()[name], arr)


def test_reconstruction_error_shrinks_with_bits():
    m = toy.trained(0)
    calib = capture_calibration(m, toy.calib(0))
    for i in range(0, m.config.total_experts, 3):
        x, _, _ = calib.expert_inputs(m.config, i)
        w = m.expert(i).w_up
        errs = [reconstruction_error(w, gptq_quantize(w, x, QuantConfig(b)).dequantize(), x) for b in (1, 2, 3)]
        assert errs[0] >= errs[1] >= errs[2]


def test_unrouted_expert_falls_back_to_rtn_with_warning():
    m = toy.random_model(3, k=1)
    rng = np.random.default_rng(0)
    v = rng.normal(size=m.config.d_model)
    # expert 3 scores 0 while one of experts 0/1 is always positive, so it never wins top-1
    router = np.stack([v, -v, rng.normal(size=m.config.d_model), np.zeros(m.config.d_model)])
    m = m.with_params({"blocks.0.router_w": router})
    calib = capture_calibration(m, toy.random_windows(m, 8))
    report = apply_allocation(m, [2] * 8, calib)
    assert report.experts[3].method == "rtn"
    assert any("expert 3" in w for w in report.warnings)
    up, _ = expert_names(m.config, 3)
    np.testing.assert_array_equal(report.model.params()[up],
                                  affine_quantize(m.params()[up], QuantConfig(2)).dequantize())


def test_plan_length_is_checked():
    m = toy.random_model(0)
    with pytest.raises(ValueError):
        apply_allocation(m, [2] * 3, capture_calibration(m, toy.random_windows(m, 2)))
