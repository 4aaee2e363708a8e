import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdit.errors import ConvergenceError, DimensionError, DomainError, NotPositiveDefiniteError, ValidationError
from qdit.numerics import Rng, as_tensor, cholesky, matmul, mix64, psd_sqrt, sym_eig


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(matmul(np.eye(3), a), a)

    def test_hand_2x2(self):
        np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), [[17], [39]])

    def test_naive_oracle_bitwise(self, rng):
        a, b = rng.standard_normal((17, 9)), rng.standard_normal((9, 5))
        np.testing.assert_array_equal(matmul(a, b), naive_matmul(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestSymEig:
    def test_diagonal(self):
        w, v = sym_eig(np.diag([3.0, 1.0]))
        np.testing.assert_allclose(w, [1.0, 3.0])
        np.testing.assert_allclose(np.abs(v), [[0, 1], [1, 0]])

    def test_hand_2x2(self):
        w, _ = sym_eig([[2.0, 1.0], [1.0, 2.0]])
        np.testing.assert_allclose(w, [1.0, 3.0], atol=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 8, 40])
    def test_reconstruction(self, rng, n):
        m = rng.standard_normal((n, n))
        a = m + m.T
        w, v = sym_eig(a)
        norm = np.linalg.norm(a)
        assert np.abs(a @ v - v * w).max() <= 1e-8 * norm
        assert np.abs(v.T @ v - np.eye(n)).max() <= 1e-8
        np.testing.assert_allclose((v * w) @ v.T, a, atol=1e-8 * norm)

    def test_trace_and_determinant(self, rng):
        for n in (2, 3, 4):
            m = rng.standard_normal((n, n))
            a = m @ m.T
            w, _ = sym_eig(a)
            assert abs(w.sum() - np.trace(a)) <= 1e-8 * abs(np.trace(a))
            assert abs(np.prod(w) - np.linalg.det(a)) <= 1e-6 * max(1.0, abs(np.linalg.det(a)))

    def test_rejects_asymmetric(self):
        with pytest.raises(ValidationError):
            sym_eig([[1.0, 2.0], [0.0, 1.0]])

    def test_rejects_oversize(self):
        with pytest.raises(DimensionError):
            sym_eig(np.eye(257))

    def test_sweep_cap(self, rng):
        m = rng.standard_normal((6, 6))
        with pytest.raises(ConvergenceError):
            sym_eig(m + m.T, max_sweeps=1)


class TestPsdSqrt:
    def test_identity(self):
        np.testing.assert_allclose(psd_sqrt(np.eye(4)), np.eye(4), atol=1e-15)

    def test_diagonal(self):
        np.testing.assert_allclose(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)

    def test_squares_back(self, rng):
        a = rng.standard_normal((6, 6))
        a = a.T @ a
        s = psd_sqrt(a)
        np.testing.assert_array_equal(s, s.T)
        assert np.abs(s @ s - a).max() <= 1e-6 * np.abs(a).max()

    def test_same_eigenvectors(self, rng):
        a = rng.standard_normal((5, 5))
        a = a.T @ a
        w, v = sym_eig(a)
        s = psd_sqrt(a)
        np.testing.assert_allclose(s @ v, v * np.sqrt(w), atol=1e-6)

    def test_clamps_tiny_negative(self):
        s = psd_sqrt(np.diag([1.0, -1e-9]))
        np.testing.assert_allclose(s, np.diag([1.0, 0.0]))

    def test_negative_is_domain_error(self):
        with pytest.raises(DomainError):
            psd_sqrt(np.diag([1.0, -0.5]))


class TestCholesky:
    def test_identity(self):
        np.testing.assert_array_equal(cholesky(np.eye(3)), np.eye(3))

    def test_hand_2x2(self):
        np.testing.assert_allclose(cholesky([[4.0, 2.0], [2.0, 3.0]]), [[2.0, 0.0], [1.0, np.sqrt(2.0)]], atol=1e-15)

    def test_reconstruction(self, rng):
        m = rng.standard_normal((16, 16))
        a = m @ m.T + 16 * np.eye(16)
        low = cholesky(a)
        np.testing.assert_array_equal(low, np.tril(low))
        assert np.abs(low @ low.T - a).max() <= 1e-8 * np.abs(a).max()

    def test_not_pd(self):
        with pytest.raises(NotPositiveDefiniteError):
            cholesky([[1.0, 2.0], [2.0, 1.0]])


class TestRng:
    def test_splitmix64_reference_vector(self):
        # published SplitMix64 outputs for seed 0
        assert [int(v) for v in Rng(0).raw(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]

    def test_frozen_streams(self):
        assert Rng(42).uniform(3).tolist() == [0.7415648787718233, 0.1599103928769201, 0.27860113025513866]
        np.testing.assert_allclose(Rng(42).normal(2), [0.8822489062222688, 1.388473285287707], rtol=1e-14)
        assert mix64(0, 1) == 0x5DC20AA7B2A27137
        assert mix64(7) == 0x863B891F4C0ABD4F

    def test_counter_semantics(self):
        a = Rng(9)
        first, second = a.raw(5), a.raw(5)
        np.testing.assert_array_equal(np.concatenate([first, second]), Rng(9).raw(10))

    @given(st.integers(0, 2**64 - 2))
    @settings(max_examples=50, deadline=None)
    def test_adjacent_seeds_differ(self, seed):
        assert not np.array_equal(Rng(seed).raw(16), Rng(seed + 1).raw(16))

    def test_uniform_range_and_moments(self):
        u = Rng(1).uniform(200_000)
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 0.005

    def test_normal_moments(self):
        z = Rng(2).normal((100_001,))
        assert abs(z.mean()) < 0.01 and abs(z.std() - 1.0) < 0.01

    def test_integers_bounds(self):
        k = Rng(3).integers(5, 10_000)
        assert k.min() == 0 and k.max() == 4
        assert isinstance(Rng(3).integers(5), int)

    def test_spawn_is_keyed(self):
        root = Rng(5)
        assert root.spawn(1).seed == Rng(5).spawn(1).seed
        assert root.spawn(1).seed != root.spawn(2).seed


def test_as_tensor_rejects_nan():
    with pytest.raises(ValidationError):
        as_tensor([1.0, np.nan])
    assert as_tensor([1, 2]).dtype == np.float32
