"""Tests for the linear-algebra and PRNG substrate."""

import math

import numpy as np
import pytest

from tcm import numerics as nm
from tcm.errors import NumericError, ShapeError


def _rand(shape, seed):
    vals, _ = nm.RngStream(seed).normals(int(np.prod(shape)))
    return vals.reshape(shape)


class TestSvd:
    def test_identity(self):
        u, s, v = nm.svd(np.eye(3))
        assert np.allclose(s, [1.0, 1.0, 1.0])
        # Columns are signed unit vectors.
        assert np.allclose(np.abs(u), np.eye(3))
        assert np.allclose(np.abs(v), np.eye(3))

    def test_diagonal(self):
        u, s, v = nm.svd(np.diag([3.0, 2.0]))
        assert np.allclose(s, [3.0, 2.0])

    def test_reconstruction_random(self):
        a = _rand((6, 3), seed=7)
        u, s, v = nm.svd(a)
        rec = u @ np.diag(s) @ v.T
        assert np.linalg.norm(rec - a) / np.linalg.norm(a) < 1e-10
        assert np.all(np.diff(s) <= 0) and np.all(s >= 0)

    def test_orthonormal_columns(self):
        for seed, shape in enumerate([(5, 5), (9, 4), (3, 8), (16, 16)]):
            a = _rand(shape, seed=seed)
            u, s, v = nm.svd(a)
            r = min(shape)
            assert np.abs(u.T @ u - np.eye(r)).max() < 1e-10
            assert np.abs(v.T @ v - np.eye(r)).max() < 1e-10

    def test_nonconvergence_error_names_shape(self):
        a = _rand((12, 7), seed=3)
        with pytest.raises(NumericError, match="12x7"):
            nm.svd(a, max_sweeps=1)

    def test_fault_hook_degrades_results(self):
        a = _rand((12, 7), seed=5)
        clean = nm.pinv(a)
        nm._fault_skip_final_sweep = True
        try:
            dirty = nm.pinv(a)
        finally:
            nm._fault_skip_final_sweep = False
        err = np.abs(a @ dirty @ a - a).max()
        assert err > 1e-8
        assert np.abs(a @ clean @ a - a).max() < 1e-8


class TestPinv:
    def test_identity(self):
        assert np.allclose(nm.pinv(np.eye(3)), np.eye(3), atol=1e-12)

    def test_singular_diagonal(self):
        p = nm.pinv(np.array([[2.0, 0.0], [0.0, 0.0]]))
        assert np.allclose(p, [[0.5, 0.0], [0.0, 0.0]], atol=1e-12)

    def test_full_column_rank_left_inverse(self):
        a = _rand((8, 4), seed=11)
        assert np.abs(nm.pinv(a) @ a - np.eye(4)).max() < 1e-8

    def test_penrose_conditions_all_shapes(self):
        idx = 0
        for m in range(1, 17, 3):
            for n in range(1, 17, 3):
                idx += 1
                a = _rand((m, n), seed=100 + idx)
                p = nm.pinv(a)
                assert np.abs(a @ p @ a - a).max() < 1e-8
                assert np.abs(p @ a @ p - p).max() < 1e-8
                assert np.abs((a @ p).T - a @ p).max() < 1e-8
                assert np.abs((p @ a).T - p @ a).max() < 1e-8

    def test_penrose_rank_deficient(self):
        a = _rand((9, 3), seed=21) @ _rand((3, 7), seed=22)  # rank <= 3
        p = nm.pinv(a)
        assert np.abs(a @ p @ a - a).max() < 1e-8
        assert np.abs(p @ a @ p - p).max() < 1e-8

    def test_rcond_validation(self):
        with pytest.raises(ShapeError):
            nm.pinv(np.eye(2), rcond=0.0)


class TestGaussian:
    def test_standard_scalar(self):
        assert nm.gauss_logpdf(np.zeros(1), np.zeros(1), 1.0) == pytest.approx(
            -0.5 * math.log(2 * math.pi)
        )

    def test_zero_quadratic_term(self):
        x = np.array([0.4, -1.1])
        assert nm.gauss_logpdf(x, x, 3.7) == pytest.approx(-math.log(2 * math.pi * 3.7))

    def test_direct_substitution(self):
        val = nm.gauss_logpdf(np.ones(2), np.zeros(2), 2.0)
        assert val == pytest.approx(-math.log(4 * math.pi) - 0.5)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            nm.gauss_logpdf(np.zeros(2), np.zeros(3), 1.0)

    def test_rows_helper_matches_scalar(self):
        xs = _rand((10, 3), seed=33)
        mean = np.array([0.2, -0.5, 1.0])
        rows = nm.gauss_logpdf_rows(xs, mean, 0.7)
        for i in range(10):
            assert rows[i] == pytest.approx(nm.gauss_logpdf(xs[i], mean, 0.7))

    def test_density_integrates_to_one(self):
        # Importance-sampling check on d <= 3: E_q[p/q] = 1 with q a wider Gaussian.
        for d in (1, 2, 3):
            mean = np.linspace(-0.5, 0.5, d)
            draws, _ = nm.sample_gaussian(nm.RngStream(500 + d), mean, 2.0, 100_000)
            logp = nm.gauss_logpdf_rows(draws, mean, 1.0)
            logq = nm.gauss_logpdf_rows(draws, mean, 2.0)
            est = float(np.mean(np.exp(logp - logq)))
            assert abs(est - 1.0) < 0.01


class TestSampling:
    def test_empty(self):
        draws, _ = nm.sample_gaussian(nm.RngStream(1), np.zeros(3), 1.0, 0)
        assert len(draws) == 0

    def test_law_of_large_numbers(self):
        draws, _ = nm.sample_gaussian(nm.RngStream(2), np.zeros(4), 1.0, 100_000)
        assert np.abs(draws.mean(axis=0)).max() < 0.02

    def test_determinism(self):
        a, _ = nm.sample_gaussian(nm.RngStream(9, stream=4), np.ones(2), 0.5, 50)
        b, _ = nm.sample_gaussian(nm.RngStream(9, stream=4), np.ones(2), 0.5, 50)
        assert np.array_equal(a, b)


class TestRngStream:
    def test_replay_is_bit_exact(self):
        r = nm.RngStream(123, stream=7)
        a, r2 = r.normals(1000)
        b, _ = nm.RngStream(123, stream=7).normals(1000)
        assert np.array_equal(a, b)
        assert r2.counter == 1000
        assert r.counter == 0  # value type, never mutated

    def test_split_streams_differ(self):
        root = nm.RngStream(55)
        a, _ = root.split(0).uniforms(100)
        b, _ = root.split(1).uniforms(100)
        assert not np.array_equal(a, b)
        c, _ = root.split(0).uniforms(100)
        assert np.array_equal(a, c)

    def test_sequential_draws_continue_sequence(self):
        r = nm.RngStream(77)
        a, r = r.uniforms(10)
        b, r = r.uniforms(10)
        both, _ = nm.RngStream(77).uniforms(20)
        assert np.array_equal(np.concatenate([a, b]), both)

    def test_integers_range(self):
        vals, _ = nm.RngStream(3).integers(5, 12, 1000)
        assert vals.min() >= 5 and vals.max() < 12

    def test_normals_moments(self):
        z, _ = nm.RngStream(4).normals(200_000)
        assert abs(z.mean()) < 0.01
        assert abs(z.std() - 1.0) < 0.01
