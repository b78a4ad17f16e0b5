import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_array_equal

from fedleak_lab import metrics

unit_images = arrays(np.float64, (1, 9, 9), elements=st.floats(0, 1))


class TestPSNR:
    def test_identical_is_capped(self, rng):
        a = rng.uniform(size=(3, 4, 4))
        assert metrics.psnr(a, a) == 100.0

    def test_uniform_half_difference(self):
        assert metrics.psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(6.0206, abs=1e-4)

    def test_double_loop_oracle(self, rng):
        a, b = rng.uniform(size=(5, 7)), rng.uniform(size=(5, 7))
        total = 0.0
        for i in range(5):
            for j in range(7):
                total += (a[i, j] - b[i, j]) ** 2
        assert metrics.psnr(a, b) == pytest.approx(10 * math.log10(35 / total), rel=1e-13)

    def test_decreasing_in_noise(self, rng):
        base = rng.uniform(0.3, 0.7, size=(8, 8))
        signs = rng.choice([-1.0, 1.0], size=base.shape)
        values = [metrics.psnr(base, base + amp * signs) for amp in (0.01, 0.05, 0.1, 0.2)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics.psnr(np.zeros(3), np.zeros(4))


class TestSSIM:
    def test_identical(self, rng):
        a = rng.uniform(size=(2, 10, 10))
        assert metrics.ssim(a, a) == pytest.approx(1.0)

    def test_black_vs_white(self):
        value = metrics.ssim(np.zeros((8, 8)), np.ones((8, 8)))
        c1 = 0.01 ** 2
        # means 0 and 1, zero variance and covariance: C1 / (1 + C1)
        assert value == pytest.approx(c1 / (1 + c1))
        assert value < 0.01

    def test_small_image_single_window(self, rng):
        a, b = rng.uniform(size=(4, 4)), rng.uniform(size=(4, 4))
        mu_a, mu_b = a.mean(), b.mean()
        cov = ((a - mu_a) * (b - mu_b)).mean()
        expected = ((2 * mu_a * mu_b + 1e-4) * (2 * cov + 9e-4)) / \
            ((mu_a ** 2 + mu_b ** 2 + 1e-4) * (a.var() + b.var() + 9e-4))
        assert metrics.ssim(a, b) == pytest.approx(expected, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(unit_images, unit_images)
    def test_symmetric_and_bounded(self, a, b):
        s = metrics.ssim(a, b)
        assert s == pytest.approx(metrics.ssim(b, a), rel=1e-12, abs=1e-12)
        assert -1 - 1e-9 <= s <= 1 + 1e-9


class TestGradientDistance:
    @pytest.mark.parametrize("metric", ["l1", "l2", "l2-mean", "cosine"])
    def test_identical(self, metric, rng):
        g = rng.normal(size=10)
        assert metrics.gradient_distance(g, g, metric) == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal_unit_vectors(self):
        assert metrics.gradient_distance([1.0, 0.0], [0.0, 1.0], "l2") == pytest.approx(math.sqrt(2))
        assert metrics.gradient_distance([1.0, 0.0], [0.0, 1.0], "cosine") == pytest.approx(1.0)
        assert metrics.gradient_distance([1.0, 0.0], [0.0, 1.0], "l2-mean") == pytest.approx(1.0)

    def test_zero_vector_cosine(self):
        assert metrics.gradient_distance([0.0, 0.0], [1.0, 2.0], "cosine") == 1.0

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            metrics.gradient_distance([1.0], [1.0], "linf")


def _brute_force_match(recons, truths):
    out = []
    for t in truths:
        best, best_r = -math.inf, None
        for r, rec in enumerate(recons):
            mse = float(np.mean((rec - t) ** 2))
            score = 100.0 if mse == 0 else min(100.0, 10 * math.log10(1 / mse))
            if score > best:
                best, best_r = score, r
        out.append(best_r)
    return out


class TestMatching:
    def test_identity(self, rng):
        imgs = rng.uniform(size=(4, 1, 3, 3))
        assert_array_equal(metrics.match_reconstructions(imgs, imgs), np.arange(4))

    def test_single_reconstruction(self, rng):
        assert_array_equal(metrics.match_reconstructions(rng.uniform(size=(1, 2, 2)), rng.uniform(size=(3, 2, 2))),
                           [0, 0, 0])

    @pytest.mark.parametrize("count", [1, 2, 4, 8])
    def test_exhaustive_oracle(self, count, rng):
        for _ in range(10):
            recons, truths = rng.uniform(size=(count, 4, 4)), rng.uniform(size=(count, 4, 4))
            assert metrics.match_reconstructions(recons, truths).tolist() == _brute_force_match(recons, truths)

    def test_exclusive_is_a_permutation(self, rng):
        recons, truths = rng.uniform(size=(4, 3, 3)), rng.uniform(size=(4, 3, 3))
        assert sorted(metrics.match_reconstructions(recons, truths, exclusive=True).tolist()) == [0, 1, 2, 3]

    def test_exclusive_greedy_small_case(self, rng):
        # the best global pair is fixed first; brute force over permutations bounds it from above
        recons, truths = rng.uniform(size=(3, 3, 3)), rng.uniform(size=(3, 3, 3))
        scores = metrics.psnr_matrix(recons, truths)
        greedy = metrics.match_reconstructions(recons, truths, exclusive=True)
        t_best, r_best = np.unravel_index(np.argmax(scores), scores.shape)
        assert greedy[t_best] == r_best
        best_perm = max(sum(scores[t, p[t]] for t in range(3)) for p in itertools.permutations(range(3)))
        assert sum(scores[t, greedy[t]] for t in range(3)) <= best_perm + 1e-12

    def test_empty(self):
        with pytest.raises(ValueError):
            metrics.match_reconstructions([], [np.zeros(2)])


class TestReport:
    def test_evaluate_and_serialize(self, tmp_path, rng):
        truths = rng.uniform(size=(3, 1, 8, 8))
        recons = np.clip(truths[::-1] + 0.05 * rng.normal(size=truths.shape), 0, 1)
        rep = metrics.evaluate_reconstruction(recons, truths, grad_fn=lambda t, r: float(t + r))
        assert rep.matched == [2, 1, 0]
        assert rep.grad_distance == [2.0, 2.0, 2.0]
        rep.write_csv(tmp_path / "m.csv")
        rep.write_json(tmp_path / "m.json")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "truth,matched,psnr,ssim,grad_distance_l2" and len(lines) == 4
        agg = json.loads((tmp_path / "m.json").read_text())
        assert agg["count"] == 3
        assert agg["psnr_mean"] == pytest.approx(np.mean(rep.psnr))
        assert agg["psnr_median"] == pytest.approx(np.median(rep.psnr))

    def test_missing_grad_distance_is_nan(self, rng):
        imgs = rng.uniform(size=(2, 1, 4, 4))
        rep = metrics.evaluate_reconstruction(imgs, imgs)
        assert all(math.isnan(v) for v in rep.grad_distance)
        assert rep.aggregates()["grad_distance_mean"] is None
