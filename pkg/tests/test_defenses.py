import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from fedleak_lab import defenses as dfn
from fedleak_lab import models

# sqrt(2 ln 1e5) / 100 evaluated with 40-digit decimal arithmetic
SIGMA_EPS100 = 0.04798525912188081207567368868904801527655

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 40), elements=finite)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        {"kind": "gaussian-dp", "epsilon": 0.0},
        {"kind": "gaussian-dp", "delta": 1.0},
        {"kind": "gaussian-dp", "clip": -1.0},
        {"kind": "sparsify", "keep_ratio": 0.0},
        {"kind": "quantize", "bits": 33},
        {"kind": "expose", "mode": "middle"},
        {"kind": "expose", "fraction": 1.5},
        {"kind": "rounding"},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            dfn.DefenseConfig(**kwargs)

    def test_sigma_decay_schedule(self):
        cfg = dfn.DefenseConfig("gaussian-dp", sigma_decay=0.99)
        assert cfg.round_sigma_scale(0) == 1.0
        assert cfg.round_sigma_scale(3) == pytest.approx(0.99 ** 3)


class TestDP:
    def test_sigma_formula(self):
        assert dfn.dp_sigma(100.0, 1e-5) == pytest.approx(SIGMA_EPS100, rel=1e-14)

    def test_no_noise_no_clip_identity(self, rng):
        g = rng.normal(size=10)
        g *= 0.5 / np.linalg.norm(g)
        assert_array_equal(dfn.dp_gaussian(g, math.inf, 1e-5, 1.0, seed=0), g)

    def test_clipping_to_norm(self, rng):
        g = rng.normal(size=20)
        g *= 2.0 / np.linalg.norm(g)
        clipped = dfn.dp_gaussian(g, math.inf, 1e-5, 1.0, seed=0)
        assert np.linalg.norm(clipped) == pytest.approx(1.0, rel=1e-15)
        assert_allclose(clipped, g / 2.0, rtol=1e-15)

    def test_noise_scale(self):
        g = np.zeros(200_000)
        noisy = dfn.dp_gaussian(g, 100.0, 1e-5, 2.0, seed=3)
        assert noisy.std() == pytest.approx(SIGMA_EPS100 * 2.0, rel=0.01)

    def test_same_seed_same_noise(self, rng):
        g = rng.normal(size=30)
        assert_array_equal(dfn.dp_gaussian(g, 10.0, 1e-5, 1.0, 7), dfn.dp_gaussian(g, 10.0, 1e-5, 1.0, 7))
        assert not np.array_equal(dfn.dp_gaussian(g, 10.0, 1e-5, 1.0, 7), dfn.dp_gaussian(g, 10.0, 1e-5, 1.0, 8))

    def test_parameter_set_layout_kept(self):
        model = models.mlp((1, 2, 2), 2, hidden=3)
        params = models.init_params(model, seed=0)
        out = dfn.dp_gaussian(params, 10.0, 1e-5, 1.0, seed=0)
        assert out.names() == params.names() and out.shapes() == params.shapes()

    def test_dispatch_seed_override(self, rng):
        g = rng.normal(size=8)
        cfg = dfn.DefenseConfig("gaussian-dp", epsilon=5.0, seed=1)
        assert_array_equal(dfn.apply_defense(g, cfg, seed=4), dfn.dp_gaussian(g, 5.0, 1e-5, 1.0, 4))
        assert_array_equal(dfn.apply_defense(g, cfg), dfn.dp_gaussian(g, 5.0, 1e-5, 1.0, 1))


class TestSparsify:
    def test_identity(self, rng):
        g = rng.normal(size=9)
        assert_array_equal(dfn.sparsify_topk(g, 1.0), g)

    def test_forced_example(self):
        assert_array_equal(dfn.sparsify_topk(np.array([0.5, -0.9, 0.1, 0.3]), 0.5), [0.5, -0.9, 0.0, 0.0])

    def test_ties_by_ascending_index(self):
        assert_array_equal(dfn.sparsify_topk(np.array([1.0, -1.0, 1.0, 0.5]), 0.5), [1.0, -1.0, 0.0, 0.0])

    @settings(max_examples=100, deadline=None)
    @given(vectors, st.floats(0.01, 1.0))
    def test_matches_full_sort_oracle(self, g, ratio):
        count = min(g.size, math.ceil(round(ratio * g.size, 9)))
        ranked = sorted(range(g.size), key=lambda i: (-abs(g[i]), i))
        expected = np.zeros_like(g)
        for i in ranked[:count]:
            expected[i] = g[i]
        assert_array_equal(dfn.sparsify_topk(g, ratio), expected)

    def test_exact_nonzero_count(self, rng):
        g = rng.normal(size=101)
        for ratio in (0.9, 0.7, 0.5, 0.3, 0.1):
            assert np.count_nonzero(dfn.sparsify_topk(g, ratio)) == math.ceil(round(ratio * 101, 9))

    def test_float_guard(self):
        assert np.count_nonzero(dfn.sparsify_topk(np.arange(1.0, 11.0), 0.7)) == 7


def _scalar_quantizer(values, bits):
    """Per-element oracle written without array operations."""
    top = max(abs(v) for v in values)
    half = (2 ** bits - 2) // 2
    step = top / half
    out = []
    for v in values:
        level = round(v / step)  # banker's rounding, as numpy
        level = max(-half, min(half, level))
        out.append(level * step)
    return out


class TestQuantize:
    def test_32_bits_near_identity(self, rng):
        g = rng.normal(size=100)
        assert np.max(np.abs(dfn.quantize(g, 32) - g)) < 1e-7

    def test_one_bit_example(self):
        assert_array_equal(dfn.quantize(np.array([-1.0, 1.0]), 1), [-1.0, 1.0])

    def test_one_bit_sign_mean(self):
        assert_allclose(dfn.quantize(np.array([-2.0, 1.0, 0.0, 3.0]), 1), [-2.0, 2.0, 0.0, 2.0])

    def test_four_bit_scalar_oracle(self, rng):
        for _ in range(20):
            g = rng.normal(size=50)
            assert_allclose(dfn.quantize(g, 4), _scalar_quantizer(g.tolist(), 4), rtol=0, atol=1e-15)

    def test_level_count(self, rng):
        out = dfn.quantize(rng.normal(size=5000), 3)
        assert len(np.unique(out)) <= 2 ** 3 - 1

    def test_all_zero(self):
        assert_array_equal(dfn.quantize(np.zeros(4), 4), 0.0)

    def test_parameter_set_per_entry(self):
        model = models.mlp((1, 2, 2), 2, hidden=3)
        params = models.init_params(model, seed=0)
        out = dfn.quantize(params, 2)
        for name in params:
            assert_allclose(out[name], dfn.quantize(params[name], 2))

    @settings(max_examples=100, deadline=None)
    @given(vectors, st.integers(1, 32))
    def test_idempotent(self, g, bits):
        once = dfn.quantize(g, bits)
        assert_allclose(dfn.quantize(once, bits), once, rtol=1e-12, atol=1e-300)


class TestExpose:
    def test_top_identity(self, rng):
        g = rng.normal(size=7)
        assert_array_equal(dfn.expose_partition(g, "top", 1.0), g)

    def test_bottom_example(self):
        assert_array_equal(dfn.expose_partition(np.array([0.5, -0.9, 0.1, 0.3]), "bottom", 0.5),
                           [0.0, 0.0, 0.1, 0.3])

    @settings(max_examples=100, deadline=None)
    @given(vectors, st.floats(0.01, 0.99))
    def test_top_and_bottom_partition(self, g, fraction):
        top = dfn.expose_partition(g, "top", fraction)
        bottom = dfn.expose_partition(g, "bottom", round(1.0 - fraction, 12))
        assert_array_equal(top + bottom, g)
        order = dfn.magnitude_order(g)
        count = math.ceil(round(fraction * g.size, 9))
        top_set, bottom_set = set(order[:count].tolist()), set(order[count:].tolist())
        assert top_set.isdisjoint(bottom_set) and len(top_set | bottom_set) == g.size

    def test_dispatch(self, rng):
        g = rng.normal(size=10)
        cfg = dfn.DefenseConfig("expose", mode="bottom", fraction=0.2)
        assert_array_equal(dfn.apply_defense(g, cfg), dfn.expose_partition(g, "bottom", 0.2))
        assert dfn.apply_defense(g, dfn.DefenseConfig()) is g
