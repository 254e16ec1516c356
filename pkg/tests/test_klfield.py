import numpy as np
import pytest

from defectchain.errors import DomainError, ParameterError
from defectchain.klfield import (BasisCache, CovarianceSpec, DecayAxis,
                                 DecaySpec, GeometrySpec, WrinkleParams,
                                 build_kl_basis, default_jacobian_grid,
                                 eval_misalignment, eval_wrinkle,
                                 export_basis_csv, import_basis_csv,
                                 jacobian_positive, nystrom_matrix,
                                 wrinkle_gradient)


def _wrinkle(basis, rng, scale=0.5, lam=12.9):
    a = scale * rng.standard_normal(basis.n_modes)
    return WrinkleParams(amplitudes=a, length_scale=lam)


class TestGeometry:
    def test_derived_quantities(self, geom):
        assert geom.total_thickness == pytest.approx(9.93)
        assert geom.arc_length == pytest.approx(22.0 * np.pi / 2.0)
        assert geom.layer_period == pytest.approx(0.255)

    def test_invalid(self):
        with pytest.raises(ParameterError):
            GeometrySpec(radius=-1.0)
        with pytest.raises(ParameterError):
            GeometrySpec(ply_count=0)


class TestNystrom:
    def test_matrix_symmetric_and_weights(self, cov):
        x, w, B = nystrom_matrix(cov)
        assert x[0] == 0.0 and x[-1] == pytest.approx(cov.length)
        h = x[1] - x[0]
        assert w[0] == pytest.approx(h / 2)
        assert w[1] == pytest.approx(h)
        assert np.sum(w) == pytest.approx(cov.length)
        assert np.allclose(B, B.T)

    def test_kernel_diagonal(self, cov):
        x = np.linspace(0, cov.length, 5)
        K = cov.kernel(x, x)
        assert np.allclose(np.diag(K), cov.sigma_f ** 2)


class TestKLBasis:
    def test_eigenvalues_sorted_nonnegative(self, basis):
        assert np.all(np.diff(basis.eigenvalues) <= 1e-12)
        assert np.all(basis.eigenvalues >= 0)

    def test_raw_mode_orthonormality(self, basis):
        G = basis.raw_modes.T @ (basis.weights[:, None] * basis.raw_modes)
        assert np.max(np.abs(G - np.eye(basis.n_modes))) < 1e-8

    def test_mercer_reconstruction(self, cov):
        # with enough modes the truncated expansion reproduces the kernel
        full = build_kl_basis(cov, n_modes=cov.grid_n // 2)
        K = full.raw_modes * full.eigenvalues[None, :] @ full.raw_modes.T
        K_exact = cov.kernel(full.grid, full.grid)
        assert np.max(np.abs(K - K_exact)) < 1e-6

    def test_variance_sum(self, cov, basis):
        # sum of leading eigenvalues captures nearly all of the trace
        # integral of C(x, x) = sigma_f^2 * L
        assert basis.eigenvalues.sum() == pytest.approx(
            cov.sigma_f ** 2 * cov.length, rel=1e-6)

    def test_modes_interpolate_grid(self, basis):
        vals = basis.mode_values(basis.grid[3])
        assert np.allclose(vals, basis.modes[3], atol=1e-12)

    def test_domain_check(self, basis):
        with pytest.raises(DomainError):
            basis.mode_values(basis.length + 1.0)
        with pytest.raises(DomainError):
            basis.mode_derivs(-1.0)

    def test_n_modes_bounds(self, cov):
        with pytest.raises(ParameterError):
            build_kl_basis(cov, n_modes=0)
        with pytest.raises(ParameterError):
            build_kl_basis(cov, n_modes=cov.grid_n)

    def test_deterministic_sign(self, cov):
        b1 = build_kl_basis(cov, 10)
        b2 = build_kl_basis(cov, 10)
        assert np.array_equal(b1.raw_modes, b2.raw_modes)


class TestDecay:
    def test_from_floor_hits_floor(self):
        g = DecayAxis.from_floor(center=5.0, boundary_distance=5.0,
                                 exponent_n=4, floor=1e-6)
        assert g(0.0) == pytest.approx(1e-6, rel=1e-9)
        assert g(10.0) == pytest.approx(1e-6, rel=1e-9)
        assert g(5.0) == 1.0

    def test_deriv_matches_fd(self):
        g = DecayAxis(center=3.0, eta=2.0, exponent_n=4)
        x = np.linspace(0.5, 5.5, 11)
        h = 1e-6
        fd = (g(x + h) - g(x - h)) / (2 * h)
        assert np.allclose(g.deriv(x), fd, rtol=1e-6, atol=1e-9)

    def test_odd_exponent_rejected(self):
        with pytest.raises(ParameterError):
            DecayAxis(center=0.0, eta=1.0, exponent_n=3)

    def test_for_geometry_floor(self, geom, decay):
        L = geom.arc_length
        assert decay.g1(0.0) == pytest.approx(1e-6, rel=1e-9)
        assert decay.g1(L) == pytest.approx(1e-6, rel=1e-9)
        # the far thickness boundary is the active x3 constraint
        assert decay.g3(geom.total_thickness) == pytest.approx(1e-6, rel=1e-9)
        assert decay.g3(4.8) == 1.0

    def test_flat_is_identity(self):
        flat = DecaySpec.flat()
        x = np.linspace(0.0, 50.0, 7)
        assert np.allclose(flat.g1(x), 1.0)
        assert np.allclose(flat.g3.deriv(x), 0.0, atol=1e-20)


class TestWrinkle:
    def test_vector_round_trip(self, rng):
        xi = WrinkleParams(amplitudes=rng.standard_normal(5),
                           length_scale=7.5)
        back = WrinkleParams.from_vector(xi.as_vector())
        assert np.array_equal(back.amplitudes, xi.amplitudes)
        assert back.length_scale == xi.length_scale

    def test_invalid_params(self):
        with pytest.raises(ParameterError):
            WrinkleParams(amplitudes=np.array([np.nan]), length_scale=1.0)
        with pytest.raises(ParameterError):
            WrinkleParams(amplitudes=np.zeros(3), length_scale=0.0)

    def test_separable_structure(self, basis, decay, rng):
        xi = _wrinkle(basis, rng)
        x1, x3 = 10.0, 4.0
        expected = (decay.g1(x1) * decay.g3(x3)
                    * float(basis.mode_values(x1) @ xi.amplitudes))
        assert eval_wrinkle(xi, basis, decay, x1, x3) == pytest.approx(expected)

    def test_gradient_matches_fd(self, basis, decay, rng):
        xi = _wrinkle(basis, rng)
        x1 = np.linspace(2.0, 30.0, 9)
        x3 = np.linspace(1.0, 8.0, 9)
        d1, d3 = wrinkle_gradient(xi, basis, decay, x1, x3)
        h = 1e-5
        fd1 = (eval_wrinkle(xi, basis, decay, x1 + h, x3)
               - eval_wrinkle(xi, basis, decay, x1 - h, x3)) / (2 * h)
        fd3 = (eval_wrinkle(xi, basis, decay, x1, x3 + h)
               - eval_wrinkle(xi, basis, decay, x1, x3 - h)) / (2 * h)
        assert np.allclose(d1, fd1, rtol=1e-4, atol=1e-8)
        assert np.allclose(d3, fd3, rtol=1e-4, atol=1e-8)

    def test_misalignment_axes(self, basis, decay, rng):
        xi = _wrinkle(basis, rng)
        phi = eval_misalignment(xi, basis, decay, 12.0, 5.0, axis=1)
        d1, _ = wrinkle_gradient(xi, basis, decay, 12.0, 5.0)
        assert phi == pytest.approx(np.arctan(d1))
        assert eval_misalignment(xi, basis, decay, 12.0, 5.0, axis=2) == 0.0
        with pytest.raises(ParameterError):
            eval_misalignment(xi, basis, decay, 12.0, 5.0, axis=3)

    def test_mismatched_basis(self, basis, decay):
        xi = WrinkleParams(amplitudes=np.zeros(basis.n_modes + 1),
                           length_scale=12.9)
        with pytest.raises(ParameterError):
            eval_wrinkle(xi, basis, decay, 1.0, 1.0)


class TestJacobian:
    def test_matches_brute_force(self, geom, basis, decay, rng):
        x1g, x3g = default_jacobian_grid(geom)
        for scale in (0.3, 1.0, 3.0, 10.0, 30.0):
            xi = _wrinkle(basis, rng, scale=scale)
            _, d3 = wrinkle_gradient(xi, basis, decay,
                                     x1g[None, :], x3g[:, None])
            brute = bool(np.min(1.0 + d3) > 0.0)
            assert jacobian_positive(xi, basis, decay, x1g, x3g) == brute

    def test_zero_wrinkle_admissible(self, geom, basis, decay):
        xi = WrinkleParams(amplitudes=np.zeros(basis.n_modes),
                           length_scale=12.9)
        x1g, x3g = default_jacobian_grid(geom)
        assert jacobian_positive(xi, basis, decay, x1g, x3g)


class TestBasisCache:
    def test_quantized_reuse(self, cov):
        cache = BasisCache(cov, n_modes=8, quantum=0.05)
        b1 = cache.get(12.90)
        b2 = cache.get(12.92)  # same 0.05 bucket
        assert b1 is b2
        b3 = cache.get(13.2)
        assert b3 is not b1
        assert len(cache) == 2

    def test_invalid(self, cov):
        cache = BasisCache(cov, n_modes=8)
        with pytest.raises(ParameterError):
            cache.get(0.0)
        with pytest.raises(ParameterError):
            BasisCache(cov, n_modes=8, quantum=0.0)


class TestBasisCsv:
    def test_round_trip(self, cov, tmp_path):
        basis = build_kl_basis(cov, 6)
        path = tmp_path / "basis.csv"
        export_basis_csv(basis, path)
        back = import_basis_csv(path)
        assert back.corr_length == pytest.approx(basis.corr_length)
        assert np.allclose(back.eigenvalues, basis.eigenvalues, rtol=1e-10)
        assert np.allclose(back.modes, basis.modes, rtol=1e-9, atol=1e-12)
