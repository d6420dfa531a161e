import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from misaligned_oac.errors import EmptyDeviceList, OffsetOutOfRange, ZeroSignalPower
from misaligned_oac.model import (
    DeviceProfile,
    calibrate_n0,
    coeff_matrix_standard,
    coeff_matrix_whitened,
    colored_noise_covariance,
    phasor_mean,
    summation_matrix,
    validate_geometry,
)

from conftest import random_geometry


def geom_of(taus, gains=None, cfos=None):
    gains = np.ones(len(taus)) if gains is None else np.asarray(gains, dtype=complex)
    cfos = np.zeros(len(taus)) if cfos is None else cfos
    return validate_geometry(
        [DeviceProfile(t, abs(g), float(np.angle(g)), c) for t, g, c in zip(taus, gains, cfos)]
    )


offset_lists = st.lists(st.floats(0.0, 0.999, allow_nan=False), min_size=1, max_size=6)


class TestValidateGeometry:
    def test_two_devices(self):
        g = geom_of([0.0, 0.25])
        np.testing.assert_allclose(g.boundaries, [0.0, 0.25])
        np.testing.assert_allclose(g.sub_lengths, [0.25, 0.75])

    def test_all_aligned_single_group(self):
        g = geom_of([0.0] * 4)
        assert g.n_filters == 1
        np.testing.assert_allclose(g.sub_lengths, [1.0])
        assert g.membership == ((0, 1, 2, 3),)

    def test_coalesced_pair(self):
        g = geom_of([0.0, 0.5, 0.5])
        assert g.n_filters == 2
        np.testing.assert_allclose(g.sub_lengths, [0.5, 0.5])
        assert g.membership == ((0,), (1, 2))

    def test_sorts_and_shifts(self):
        g = geom_of([0.7, 0.2, 0.45])
        np.testing.assert_allclose(g.taus, [0.0, 0.25, 0.5])
        assert g.order == (1, 2, 0)

    def test_errors(self):
        with pytest.raises(EmptyDeviceList):
            validate_geometry([])
        with pytest.raises(OffsetOutOfRange):
            DeviceProfile(1.0)
        with pytest.raises(OffsetOutOfRange):
            DeviceProfile(-0.1)

    @settings(max_examples=200, deadline=None)
    @given(offset_lists)
    def test_invariants(self, taus):
        g = geom_of(taus)
        # oracle: brute-force distinct offsets after the shift
        t0 = min(taus)
        distinct = sorted({t - t0 for t in taus})
        np.testing.assert_array_equal(g.boundaries, distinct)
        assert np.all(np.diff(g.edges) > 0)
        assert np.all(g.sub_lengths > 0)
        np.testing.assert_allclose(g.sub_lengths.sum(), 1.0, rtol=0, atol=1e-12)
        members = sorted(m for grp in g.membership for m in grp)
        assert members == list(range(len(taus)))
        assert g.taus[0] == 0.0


def overlap_integral(gain, cfo, a, b):
    re = quad(lambda t: (gain * np.exp(1j * cfo * t)).real, a, b)[0]
    im = quad(lambda t: (gain * np.exp(1j * cfo * t)).imag, a, b)[0]
    return re + 1j * im


def brute_force_A(geom, L):
    """Integrate each device's rectangular pulse over every sampling window."""
    M, Mf = geom.n_devices, geom.n_filters
    A = np.zeros((Mf * L, M * L), dtype=complex)
    for i in range(1, L + 1):
        for k in range(Mf):
            w0 = (i - 1) + geom.boundaries[k]
            for m, p in enumerate(geom.profiles):
                for l in range(1, L + 1):
                    a = max(w0, l - 1 + p.tau)
                    b = min(w0 + 1, l + p.tau)
                    if b > a + 1e-15:
                        A[(i - 1) * Mf + k, (l - 1) * M + m] = overlap_integral(p.gain, p.cfo, a, b)
    return A


def brute_force_D(geom, L):
    M, Mf = geom.n_devices, geom.n_filters
    edges = geom.edges
    D = np.zeros((Mf * (L + 1) - 1, M * L), dtype=complex)
    for i in range(1, L + 2):
        for b in range(Mf):
            row = (i - 1) * Mf + b
            if row >= D.shape[0]:
                continue
            a0, a1 = (i - 1) + edges[b], (i - 1) + edges[b + 1]
            for m, p in enumerate(geom.profiles):
                for l in range(1, L + 1):
                    a = max(a0, l - 1 + p.tau)
                    bb = min(a1, l + p.tau)
                    if bb > a + 1e-15:
                        D[row, (l - 1) * M + m] = overlap_integral(p.gain, p.cfo, a, bb) / (a1 - a0)
    return D


class TestStandardMatrix:
    def test_two_device_overlaps(self):
        g = geom_of([0.0, 0.25])
        A = coeff_matrix_standard(g, 3).dense()
        # r_1[i] (window [i-1, i)): device 2 symbols i-1 and i
        i = 2
        row1 = (i - 1) * 2 + 0
        np.testing.assert_allclose(A[row1, (i - 2) * 2 + 1], 0.25)
        np.testing.assert_allclose(A[row1, (i - 1) * 2 + 1], 0.75)
        # r_2[i] (window [i-1+0.25, i+0.25)): device 1 symbols i and i+1
        row2 = (i - 1) * 2 + 1
        np.testing.assert_allclose(A[row2, (i - 1) * 2 + 0], 0.75)
        np.testing.assert_allclose(A[row2, i * 2 + 0], 0.25)

    def test_matches_quadrature(self, rng):
        for M in (1, 2, 3):
            g = random_geometry(rng, M, cfo_max=0.8)
            np.testing.assert_allclose(coeff_matrix_standard(g, 4).dense(), brute_force_A(g, 4), atol=1e-10)

    def test_aligned_reduces_to_sum(self):
        g = geom_of([0.0, 0.0, 0.0])
        A = coeff_matrix_standard(g, 4).dense()
        np.testing.assert_allclose(A, summation_matrix(3, 4).toarray())

    def test_interior_row_sums(self, rng):
        for _ in range(20):
            M = int(rng.integers(1, 5))
            g = random_geometry(rng, M)
            L = 6
            A = coeff_matrix_standard(g, L).dense()
            interior = slice(g.n_filters, g.n_filters * (L - 1))
            np.testing.assert_allclose(A[interior].sum(axis=1), g.gains.sum(), atol=1e-12)

    def test_at_most_2m_minus_1_nonzeros(self, rng):
        g = random_geometry(rng, 4)
        A = coeff_matrix_standard(g, 8).dense()
        assert np.max(np.count_nonzero(A, axis=1)) <= 2 * 4 - 1


class TestWhitenedMatrix:
    def test_two_device_window(self):
        g = geom_of([0.0, 0.5])
        D = coeff_matrix_whitened(g, 1).dense()
        # rows y_1[1], y_2[1], y_1[2]
        np.testing.assert_allclose(D, [[1, 0], [1, 1], [0, 1]])

    def test_matches_quadrature(self, rng):
        for M in (1, 2, 4):
            g = random_geometry(rng, M, cfo_max=1.5)
            np.testing.assert_allclose(coeff_matrix_whitened(g, 3).dense(), brute_force_D(g, 3), atol=1e-10)

    def test_cfo_quadrature_value(self):
        # mean of exp(j 2 pi t) over [0, 0.5]
        g = geom_of([0.0, 0.5], cfos=[2 * np.pi, 0.0])
        D = coeff_matrix_whitened(g, 2).dense()
        oracle = overlap_integral(1.0, 2 * np.pi, 0.0, 0.5) / 0.5
        np.testing.assert_allclose(oracle, 2j / np.pi, atol=1e-12)
        np.testing.assert_allclose(D[0, 0], 2j / np.pi, atol=1e-12)

    def test_small_cfo_limit(self):
        for eps in (1e-10, 1e-13, 0.0):
            g = geom_of([0.0, 0.3], gains=[0.8 * np.exp(0.4j), 1.0], cfos=[eps, 0.0])
            D = coeff_matrix_whitened(g, 1).dense()
            np.testing.assert_allclose(D[0, 0], 0.8 * np.exp(0.4j), rtol=1e-9)

    def test_phasor_mean_series_continuity(self):
        xs = np.array([1e-9, 2e-8, 1e-7])
        np.testing.assert_allclose(phasor_mean(xs), (np.exp(1j * xs) - 1) / (1j * xs), rtol=1e-7)
        assert phasor_mean(0.0) == 1.0

    def test_entries_bounded_by_gain(self, rng):
        for _ in range(30):
            g = random_geometry(rng, int(rng.integers(1, 5)), cfo_max=3.0)
            D = coeff_matrix_whitened(g, 5)
            mat = D.matrix.tocoo()
            amps = np.abs(g.gains)[mat.col % g.n_devices]
            assert np.all(np.abs(mat.data) <= amps + 1e-12)

    def test_zero_cfo_entries_equal_gain(self, rng):
        g = random_geometry(rng, 3)
        mat = coeff_matrix_whitened(g, 5).matrix.tocoo()
        np.testing.assert_allclose(mat.data, g.gains[mat.col % 3])

    def test_full_column_rank(self, rng):
        for _ in range(40):
            M = int(rng.integers(1, 5))
            L = int(rng.choice([1, 4, 16]))
            g = random_geometry(rng, M)
            s = np.linalg.svd(coeff_matrix_whitened(g, L).dense(), compute_uv=False)
            assert s[-1] > 1e-9

    def test_neighbor_count_law(self, rng):
        M, L = 4, 5
        g = random_geometry(rng, M)
        D = coeff_matrix_whitened(g, L).dense()
        nnz = np.count_nonzero(D, axis=1)
        for t, count in enumerate(nnz):
            i, k = divmod(t, M)
            k += 1
            if i == 0:
                expected = k
            elif i == L:
                expected = M - k
            else:
                expected = M
            assert count == expected, (t, count, expected)


class TestSummationMatrix:
    def test_small(self):
        np.testing.assert_array_equal(summation_matrix(2, 2).toarray(), [[1, 1, 0, 0], [0, 0, 1, 1]])

    def test_single_device_identity(self):
        np.testing.assert_array_equal(summation_matrix(1, 5).toarray(), np.eye(5))

    @given(st.integers(1, 6), st.integers(1, 10))
    def test_row_structure(self, M, L):
        V = summation_matrix(M, L).toarray()
        np.testing.assert_array_equal(V @ np.ones(M * L), np.full(L, M))
        assert np.all(V.sum(axis=0) == 1)


class TestColoredCovariance:
    def test_diagonal(self, rng):
        g = random_geometry(rng, 3)
        C = colored_noise_covariance(g, 4, 2.5)
        np.testing.assert_allclose(np.diag(C), 2.5)

    def test_disjoint_windows(self):
        g = geom_of([0.0, 0.3])
        C = colored_noise_covariance(g, 4, 1.0)
        # r_1[1] and r_1[2] start one period apart
        assert C[0, 2] == 0.0

    def test_partial_overlap(self):
        g = geom_of([0.0, 0.3])
        C = colored_noise_covariance(g, 2, 1.0)
        np.testing.assert_allclose(C[0, 1], 0.7)

    def test_monte_carlo_partial_overlap(self):
        # integrate white noise of PSD 1 on a 0.1 grid over [0, 1) and [0.3, 1.3)
        rng = np.random.default_rng(7)
        n, dt = 200_000, 0.1
        w = (rng.standard_normal((n, 13)) + 1j * rng.standard_normal((n, 13))) * np.sqrt(dt / 2)
        z1 = w[:, 0:10].sum(axis=1)
        z2 = w[:, 3:13].sum(axis=1)
        emp = np.mean(z1 * np.conj(z2))
        np.testing.assert_allclose(emp.real, 0.7, atol=0.015)
        np.testing.assert_allclose(np.mean(np.abs(z1) ** 2), 1.0, atol=0.015)

    def test_hermitian_psd(self, rng):
        for _ in range(20):
            g = random_geometry(rng, int(rng.integers(1, 5)))
            C = colored_noise_covariance(g, 6, 1.3)
            np.testing.assert_allclose(C, C.conj().T)
            ev = np.linalg.eigvalsh(C)
            assert ev.min() >= -1e-10 * ev.max()


class TestCalibration:
    def test_unit_power(self):
        g = geom_of([0.0])
        np.testing.assert_allclose(calibrate_n0(g, np.array([[1, -1, 1j, -1j]]), 0.0), 1.0)

    def test_noiseless(self):
        g = geom_of([0.0])
        assert calibrate_n0(g, np.ones((1, 3)), np.inf) == 0.0

    def test_perfect_cancellation(self):
        g = geom_of([0.0, 0.2], gains=[1.0, -1.0])
        with pytest.raises(ZeroSignalPower):
            calibrate_n0(g, np.ones((2, 4)), 10.0)

    def test_db_scaling(self, rng):
        g = random_geometry(rng, 3)
        s = rng.standard_normal((3, 8))
        np.testing.assert_allclose(calibrate_n0(g, s, 0.0) / calibrate_n0(g, s, 10.0), 10.0)
