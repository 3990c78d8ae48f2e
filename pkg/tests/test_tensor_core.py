import io

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from crnet import tensor_core as tc
from crnet._validation import ShapeError


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def matrices(max_side=8):
    shapes = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shapes.flatmap(lambda s: arrays(np.float64, s, elements=finite))


class TestElementwise:
    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tc.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_softmax_rows_sum_to_one(self, rng):
        p = tc.softmax_rows(rng.normal(size=(4, 6)) * 30)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-14)

    def test_causal_mask_zeroes_future(self, rng):
        p = tc.softmax_rows(rng.normal(size=(5, 5)), causal_mask=True)
        assert np.all(np.triu(p, 1) == 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        assert p[0, 0] == 1.0

    def test_sigmoid_extremes(self):
        s = tc.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        assert np.all(np.isfinite(s))
        np.testing.assert_allclose(s, [0.0, 0.5, 1.0])

    def test_silu_prime_matches_difference(self):
        x = np.linspace(-5, 5, 41)
        h = 1e-6
        fd = (tc.silu(x + h) - tc.silu(x - h)) / (2 * h)
        np.testing.assert_allclose(tc.silu_prime(x), fd, atol=1e-8)

    def test_frobenius(self):
        a = np.array([[3.0, 0.0], [0.0, 4.0]])
        assert tc.frob_norm(a) == pytest.approx(5.0)
        assert tc.frob_inner(a, np.eye(2)) == pytest.approx(7.0)

    def test_axpy_hadamard_transpose(self):
        a, b = np.ones((2, 3)), np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(tc.axpy(2.0, a, b), 2 * a + b)
        np.testing.assert_array_equal(tc.hadamard(a * 2, b), 2 * b)
        assert tc.transpose(b).shape == (3, 2)

    @given(arrays(np.float64, (3, 5), elements=finite))
    def test_softmax_shift_invariant(self, m):
        np.testing.assert_allclose(tc.softmax_rows(m), tc.softmax_rows(m + 7.5), atol=1e-12)


class TestSvd:
    def test_identity(self):
        res = tc.svd(np.eye(4))
        np.testing.assert_allclose(res.sigma, np.ones(4))

    def test_rank_one(self):
        u, v = np.arange(1.0, 5.0), np.array([1.0, -2.0, 0.5])
        res = tc.svd(np.outer(u, v))
        assert res.sigma[0] == pytest.approx(np.linalg.norm(u) * np.linalg.norm(v))
        assert np.all(res.sigma[1:] < 1e-12)

    def test_zero_matrix(self):
        res = tc.svd(np.zeros((3, 2)))
        assert np.all(res.sigma == 0)

    @given(matrices())
    def test_reconstruction_and_orthogonality(self, a):
        res = tc.svd(a)
        scale = max(1.0, np.abs(a).max())
        np.testing.assert_allclose(res.reconstruct(), a, atol=1e-10 * scale)
        k = res.sigma.size
        np.testing.assert_allclose(res.U.T @ res.U, np.eye(k), atol=1e-10)
        np.testing.assert_allclose(res.V.T @ res.V, np.eye(k), atol=1e-10)
        assert np.all(np.diff(res.sigma) <= 1e-12 * scale)

    @given(matrices())
    def test_singular_values_match_eigenvalues(self, a):
        ref = np.sqrt(np.clip(np.linalg.eigvalsh(a.T @ a), 0, None))[::-1][: min(a.shape)]
        np.testing.assert_allclose(tc.svd(a).sigma, ref, atol=1e-7 * max(1.0, np.abs(a).max()))

    @given(matrices(6), st.integers(0, 6))
    def test_eckart_young_error(self, a, r):
        r = min(r, min(a.shape))
        sigma = tc.svd(a).sigma
        err = tc.frob_norm(a - tc.low_rank_approx(a, r)) ** 2
        assert err == pytest.approx(float(np.sum(sigma[r:] ** 2)), abs=1e-9 * max(1.0, np.abs(a).max() ** 2))

    @pytest.mark.parametrize("scale", [1e-160, 1e-300, 1e150, 1e300])
    def test_extreme_scales(self, scale, rng):
        a = rng.normal(size=(5, 4))
        np.testing.assert_allclose(tc.svd(a * scale).sigma, tc.svd(a).sigma * scale, rtol=1e-12)

    def test_low_rank_rejects_bad_rank(self):
        with pytest.raises(ValueError):
            tc.low_rank_approx(np.ones((3, 3)), 4)

    def test_spectral_and_stable_rank(self, rng):
        a = rng.normal(size=(10, 7))
        assert tc.spectral_norm(a) == pytest.approx(np.linalg.norm(a, 2), rel=1e-10)
        sr = tc.stable_rank(a)
        assert 1.0 <= sr <= 7.0
        assert tc.stable_rank(np.outer(np.ones(4), np.ones(3))) == pytest.approx(1.0)


class TestCrmx:
    @given(matrices())
    def test_round_trip_is_bitwise(self, a):
        buf = io.BytesIO(tc.to_bytes(a))
        b = tc.read_matrix(buf)
        assert b.shape == a.shape
        assert b.tobytes() == np.ascontiguousarray(a).tobytes()

    def test_file_round_trip(self, tmp_path, rng):
        a = rng.normal(size=(3, 4))
        tc.save_matrix(tmp_path / "m.crmx", a)
        np.testing.assert_array_equal(tc.load_matrix(tmp_path / "m.crmx"), a)

    def test_truncated_stream_names_offset(self, rng):
        data = tc.to_bytes(rng.normal(size=(3, 4)))
        with pytest.raises(EOFError, match="payload at offset"):
            tc.read_matrix(io.BytesIO(data[:-5]))
        with pytest.raises(EOFError, match="header"):
            tc.read_matrix(io.BytesIO(data[:10]))

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            tc.read_matrix(io.BytesIO(b"XXXX" + bytes(20)))
