import cmath
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from radar_distill.errors import FormatError
from radar_distill.tensor import (dft_matrix, gaussian_perturb, make_rng, tensor_from_bytes,
                                  tensor_read, tensor_write, window)


def brute_dft(n, sign=-1):
    return np.array([[cmath.exp(sign * 2j * math.pi * j * k / n) for k in range(n)]
                     for j in range(n)])


class TestDftMatrix:
    def test_small_cases(self):
        np.testing.assert_array_equal(dft_matrix(1), [[1 + 0j]])
        np.testing.assert_allclose(dft_matrix(2), [[1, 1], [1, -1]], atol=1e-15)

    @pytest.mark.parametrize("n", [3, 4, 7, 16, 31])
    def test_matches_exponential_oracle(self, n):
        np.testing.assert_allclose(dft_matrix(n), brute_dft(n), atol=1e-12, rtol=0)
        np.testing.assert_allclose(dft_matrix(n, "inverse"), brute_dft(n, +1), atol=1e-12, rtol=0)
        np.testing.assert_allclose(dft_matrix(n, scaling="unitary"), brute_dft(n) / math.sqrt(n),
                                   atol=1e-12, rtol=0)

    @pytest.mark.parametrize("n", [2, 4, 8, 16, 64])
    def test_unitary(self, n):
        u = dft_matrix(n, scaling="unitary")
        np.testing.assert_allclose(u @ u.conj().T, np.eye(n), atol=1e-10, rtol=0)

    def test_matches_numpy_fft(self):
        x = make_rng(1).standard_normal(12) + 1j * make_rng(2).standard_normal(12)
        np.testing.assert_allclose(dft_matrix(12) @ x, np.fft.fft(x), atol=1e-12)

    @given(hnp.arrays(np.complex128, st.integers(1, 32),
                      elements=st.complex_numbers(max_magnitude=1e3, allow_nan=False,
                                                  allow_infinity=False)))
    @settings(max_examples=60, deadline=None)
    def test_parseval(self, x):
        y = dft_matrix(len(x), scaling="unitary") @ x
        nx = np.vdot(x, x).real
        assert abs(np.vdot(y, y).real - nx) <= 1e-10 * max(nx, 1e-300)

    def test_errors(self):
        with pytest.raises(ValueError):
            dft_matrix(0)
        with pytest.raises(ValueError):
            dft_matrix(4, direction="sideways")
        with pytest.raises(ValueError):
            dft_matrix(4, scaling="ortho")


class TestWindow:
    def test_rectangular(self):
        np.testing.assert_array_equal(window("rectangular", 8), np.ones(8))

    def test_hann_five(self):
        w = window("hann", 5)
        assert w[0] == 0 and w[-1] == 0 and w[2] == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_array_equal(w, w[::-1])

    def test_hamming_three(self):
        np.testing.assert_allclose(window("hamming", 3), [0.08, 1.0, 0.08], atol=1e-15)

    @pytest.mark.parametrize("kind,ref", [("hann", np.hanning), ("hamming", np.hamming),
                                          ("blackman", np.blackman)])
    @pytest.mark.parametrize("n", [2, 5, 32, 64])
    def test_matches_numpy_symmetric_windows(self, kind, ref, n):
        np.testing.assert_allclose(window(kind, n), ref(n), atol=1e-15)

    def test_length_one(self):
        for kind in ("rectangular", "hann", "hamming", "blackman"):
            np.testing.assert_array_equal(window(kind, 1), [1.0])

    def test_errors(self):
        with pytest.raises(ValueError):
            window("hann", 0)
        with pytest.raises(ValueError):
            window("kaiser", 8)


class TestGaussianPerturb:
    def test_zero_gamma_is_identity_copy(self):
        m = dft_matrix(8)
        out = gaussian_perturb(m, 0.0, make_rng(0))
        np.testing.assert_array_equal(out, m)
        assert out is not m

    def test_sample_statistics(self):
        m = dft_matrix(256)
        e = gaussian_perturb(m, 0.1, make_rng(3)) - m
        for part in (e.real, e.imag):
            assert abs(part.mean()) < 0.01
            assert 0.08 <= part.var() <= 0.12
        # real and imaginary noise are independent draws
        assert abs(np.corrcoef(e.real.ravel(), e.imag.ravel())[0, 1]) < 0.01

    def test_deterministic_and_pure(self):
        m = dft_matrix(16)
        before = m.copy()
        a = gaussian_perturb(m, 0.1, make_rng(5))
        b = gaussian_perturb(m, 0.1, make_rng(5))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(m, before)

    def test_affine_in_input(self):
        m1, m2 = dft_matrix(6), 0.3 * dft_matrix(6, "inverse")
        lhs = gaussian_perturb(m1 + m2, 0.2, make_rng(9))
        rhs = gaussian_perturb(m1, 0.2, make_rng(9)) + m2
        np.testing.assert_allclose(lhs, rhs, atol=1e-15)

    def test_real_input_stays_real(self):
        out = gaussian_perturb(np.eye(4), 0.1, make_rng(0))
        assert not np.iscomplexobj(out) and np.any(out != np.eye(4))

    def test_negative_gamma(self):
        with pytest.raises(ValueError):
            gaussian_perturb(np.eye(2), -0.1, make_rng(0))


def test_rng_reproducible_streams():
    a = make_rng(42, 3).standard_normal(1000)
    b = make_rng(42, 3).standard_normal(1000)
    c = make_rng(42, 4).standard_normal(1000)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


class TestRten:
    @pytest.mark.parametrize("arr", [
        np.arange(6.0).reshape(2, 3),
        np.array([-0.0, 0.0, np.inf, -np.inf, 5e-324]),
        (np.arange(24.0) - 1j * np.arange(24.0)[::-1]).reshape(2, 3, 4),
        np.array([complex(-0.0, -0.0), complex(0.0, -0.0)]),
    ])
    def test_round_trip_bits(self, tmp_path, arr):
        p = tmp_path / "t.rten"
        tensor_write(p, arr)
        out = tensor_read(p)
        assert out.shape == arr.shape and np.iscomplexobj(out) == np.iscomplexobj(arr)
        if np.iscomplexobj(arr):
            assert out.real.tobytes() == arr.real.tobytes()
            assert out.imag.tobytes() == arr.imag.tobytes()
        else:
            assert out.tobytes() == arr.astype(np.float64).tobytes()

    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                      elements=st.floats(allow_nan=False)))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_property(self, arr):
        import os
        import tempfile
        fd, path = tempfile.mkstemp(suffix=".rten")
        os.close(fd)
        try:
            tensor_write(path, arr)
            assert tensor_read(path).tobytes() == arr.tobytes()
        finally:
            os.remove(path)

    def test_layout(self, tmp_path):
        p = tmp_path / "t.rten"
        tensor_write(p, np.array([[1.0 + 2.0j, 3.0 + 4.0j]]))
        raw = p.read_bytes()
        assert raw[:4] == b"RTEN"
        assert struct.unpack("<III", raw[4:16]) == (1, 1, 2)
        assert struct.unpack("<QQ", raw[16:32]) == (1, 2)
        assert struct.unpack("<4d", raw[32:]) == (1.0, 3.0, 2.0, 4.0)

    def _good(self):
        return struct.pack("<4sIII", b"RTEN", 1, 0, 1) + struct.pack("<Q", 2) + struct.pack("<2d", 1, 2)

    def test_bad_magic(self):
        raw = b"XTEN" + self._good()[4:]
        with pytest.raises(FormatError, match="RTEN") as ei:
            tensor_from_bytes(raw)
        assert ei.value.offset == 0

    @pytest.mark.parametrize("offset,field,value", [(4, "version", 2), (8, "dtype", 7), (12, "ndim", 0),
                                                    (12, "ndim", 9)])
    def test_bad_header_fields(self, offset, field, value):
        raw = bytearray(self._good())
        raw[offset:offset + 4] = struct.pack("<I", value)
        with pytest.raises(FormatError) as ei:
            tensor_from_bytes(bytes(raw))
        assert ei.value.offset == offset

    def test_truncated_and_trailing(self):
        good = self._good()
        for cut in (3, 10, 20, len(good) - 1):
            with pytest.raises(FormatError):
                tensor_from_bytes(good[:cut])
        with pytest.raises(FormatError):
            tensor_from_bytes(good + b"\0")

    def test_extent_overflow(self):
        raw = struct.pack("<4sIII", b"RTEN", 1, 0, 2) + struct.pack("<QQ", 2 ** 40, 2 ** 40)
        with pytest.raises(FormatError, match="offset"):
            tensor_from_bytes(raw)

    def test_zero_extent_rejected(self):
        raw = struct.pack("<4sIII", b"RTEN", 1, 0, 1) + struct.pack("<Q", 0)
        with pytest.raises(FormatError):
            tensor_from_bytes(raw)

    def test_write_preconditions(self, tmp_path):
        with pytest.raises(ValueError):
            tensor_write(tmp_path / "a.rten", np.float64(1.0))
        with pytest.raises(ValueError):
            tensor_write(tmp_path / "b.rten", np.zeros((0, 3)))
        with pytest.raises(ValueError):
            tensor_write(tmp_path / "c.rten", np.zeros((1,) * 9))
