import numpy as np
import pytest

from defectchain.errors import DataError, DomainError, ParameterError
from defectchain.klfield import WrinkleParams
from defectchain.mfia import (GrayImage, GroundTruthField,
                              MisalignmentSamples, TrialFibreConfig,
                              estimate_angle, fibre_variance,
                              hierarchical_sample, physical_to_pixel_angle,
                              pixel_to_physical_angle, synth_bscan,
                              unwrap_corner, wrap_corner)


def _stripe_image(theta_pix, shape=(128, 128), period_px=8.0,
                  pitch=(0.05, 0.05)):
    """Stripes whose constant-gray direction is theta_pix from the col axis."""
    r, c = np.mgrid[0:shape[0], 0:shape[1]]
    phase = r * np.cos(theta_pix) - c * np.sin(theta_pix)
    gray = 127.5 + 100.0 * np.cos(2 * np.pi * phase / period_px)
    return GrayImage(gray, *pitch)


class TestGrayImage:
    def test_pgm_round_trip(self, tmp_path, rng):
        img = GrayImage(rng.integers(0, 256, (20, 30), dtype=np.uint8),
                        0.1, 0.2)
        path = tmp_path / "x.pgm"
        img.to_pgm(path)
        back = GrayImage.from_pgm(path, 0.1, 0.2)
        assert np.array_equal(back.pixels, img.pixels)
        assert (back.height, back.width) == (20, 30)

    def test_pgm_comment_header(self, tmp_path):
        raster = bytes(range(16)) * 16
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n16 16\n255\n" + raster)
        img = GrayImage.from_pgm(path, 1.0, 1.0)
        assert img.pixels[0, 5] == 5

    def test_invalid(self):
        with pytest.raises(ParameterError):
            GrayImage(np.zeros((4, 4)), 1.0, 1.0)
        with pytest.raises(ParameterError):
            GrayImage(np.zeros((20, 20)), 0.0, 1.0)


class TestAngleConversion:
    def test_isotropic_identity(self):
        img = GrayImage(np.zeros((20, 20)), 0.1, 0.1)
        phi = np.linspace(-1.2, 1.2, 9)
        assert np.allclose(pixel_to_physical_angle(phi, img), phi)

    def test_anisotropic_round_trip(self):
        img = GrayImage(np.zeros((20, 20)), 0.08, 0.04)
        phi = np.linspace(-1.0, 1.0, 9)
        back = physical_to_pixel_angle(pixel_to_physical_angle(phi, img), img)
        assert np.allclose(back, phi, atol=1e-12)

    def test_tan_pitch_relation(self):
        img = GrayImage(np.zeros((20, 20)), 0.08, 0.04)
        phi_pix = 0.3
        phi = pixel_to_physical_angle(phi_pix, img)
        assert np.tan(phi) == pytest.approx(0.5 * np.tan(phi_pix))


class TestTrialFibre:
    def test_for_ply_rule(self):
        cfg = TrialFibreConfig.for_ply(6.0)
        assert cfg.fibre_length == 18.0

    def test_variance_zero_along_stripes(self):
        theta = np.deg2rad(10.0)
        img = _stripe_image(theta)
        cfg = TrialFibreConfig(fibre_length=15)
        v_along = fibre_variance(img, (64, 64), theta, cfg)
        v_across = fibre_variance(img, (64, 64), theta + 0.5, cfg)
        assert v_along < 1e-2 * v_across

    def test_outside_image_raises(self):
        img = _stripe_image(0.2)
        cfg = TrialFibreConfig(fibre_length=15)
        with pytest.raises(DomainError):
            fibre_variance(img, (-200, -200), 0.0, cfg)

    @pytest.mark.parametrize("deg", [-20.0, -5.0, 0.0, 7.0, 25.0])
    def test_estimate_angle_recovers_stripes(self, deg):
        theta = np.deg2rad(deg)
        img = _stripe_image(theta)
        cfg = TrialFibreConfig(fibre_length=15)
        est = estimate_angle(img, (64.5, 64.5), cfg)
        assert abs(est - theta) < np.deg2rad(0.3)

    def test_constant_image_tie_break(self):
        img = GrayImage(np.full((64, 64), 90.0), 0.1, 0.1)
        cfg = TrialFibreConfig(fibre_length=15)
        assert estimate_angle(img, (32, 32), cfg) == 0.0


class TestMisalignmentSamples:
    def test_csv_round_trip(self, tmp_path, rng):
        s = MisalignmentSamples(rng.uniform(0, 30, 17),
                                rng.uniform(0, 9, 17),
                                rng.uniform(-1.0, 1.0, 17), source="t")
        path = tmp_path / "s.csv"
        s.to_csv(path)
        back = MisalignmentSamples.from_csv(path)
        assert np.allclose(back.x1, s.x1, rtol=1e-11)
        assert np.allclose(back.phi, s.phi, rtol=1e-11)

    def test_angle_bound(self):
        with pytest.raises(DataError):
            MisalignmentSamples([1.0], [1.0], [np.pi / 2])

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            MisalignmentSamples([1.0, 2.0], [1.0], [0.1])


class TestHierarchicalSample:
    def _two_region_image(self):
        """Slanted stripes in the top-left quadrant, horizontal elsewhere."""
        top_left = _stripe_image(np.deg2rad(25.0), shape=(128, 128)).pixels
        flat = _stripe_image(0.0, shape=(128, 128)).pixels
        px = flat.copy()
        px[:64, :64] = top_left[:64, :64]
        return GrayImage(px, 0.05, 0.05)

    def test_counts_and_gammas(self, rng):
        img = self._two_region_image()
        cfg = TrialFibreConfig(fibre_length=11)
        tree, samples = hierarchical_sample(img, cfg, levels=2,
                                            budgets=[48, 48], rng=rng, m0=4)
        assert len(tree.levels) == 2
        for level in tree.levels:
            gammas = np.array([c.gamma for c in level])
            assert gammas.sum() == pytest.approx(1.0, abs=1e-12)
        n0 = 4 * int(np.ceil(48 / 4))
        alloc1 = sum(int(np.ceil(c.gamma * 48)) for c in tree.levels[0])
        assert len(samples) == n0 + alloc1
        # points on the level-1 mesh account for every sample exactly once
        assert sum(c.n_points for c in tree.levels[1]) == len(samples)

    def test_bias_toward_wrinkle_quadrant(self, rng):
        img = self._two_region_image()
        cfg = TrialFibreConfig(fibre_length=11)
        tree, _ = hierarchical_sample(img, cfg, levels=2,
                                      budgets=[48, 200], rng=rng, m0=4)
        # the slanted quadrant is parent cell (0, 0) on a 2x2 coarse mesh
        assert tree.m0_rows == 2 and tree.m0_cols == 2
        gammas = [c.gamma for c in tree.levels[0]]
        assert gammas[0] > 0.5

    def test_budget_list_validation(self, rng):
        img = self._two_region_image()
        cfg = TrialFibreConfig(fibre_length=11)
        with pytest.raises(ParameterError):
            hierarchical_sample(img, cfg, levels=2, budgets=[10, 10, 10],
                                rng=rng)
        with pytest.raises(ParameterError):
            hierarchical_sample(img, cfg, levels=0, budgets=[10], rng=rng)

    def test_distinct_pixels_per_level(self, rng):
        img = self._two_region_image()
        cfg = TrialFibreConfig(fibre_length=11)
        _, samples = hierarchical_sample(img, cfg, levels=1, budgets=[100],
                                         rng=rng, m0=4)
        pts = set(zip(samples.x1.tolist(), samples.x3.tolist()))
        assert len(pts) == len(samples)


class TestCornerUnwrap:
    def test_flat_passthrough(self, geom):
        img = GrayImage(np.arange(400).reshape(20, 20) % 256, 0.1, 0.1)
        out = unwrap_corner(img, geom, focus_radius=geom.radius, flat=True)
        assert np.array_equal(out.pixels, img.pixels)

    def test_wrap_unwrap_round_trip(self, geom):
        # smooth flat field so bilinear resampling error stays small
        p1, p3 = 0.15, 0.1
        focus = geom.radius + 4.8
        arc_f = (np.pi / 2.0) * focus
        n_cols = int(np.ceil(arc_f / p1))
        n_rows = int(np.ceil(geom.total_thickness / p3))
        x = (np.arange(n_cols) + 0.5) * p1
        z = (np.arange(n_rows) + 0.5) * p3
        gray = (127.5 + 60 * np.sin(2 * np.pi * np.outer(z, np.ones_like(x))
                                    / 3.0)
                + 40 * np.sin(2 * np.pi * np.outer(np.ones_like(z), x) / 11.0))
        flat = GrayImage(gray, p1, p3)
        wrapped = wrap_corner(flat, geom, focus, out_pitch_x1=0.05,
                              out_pitch_x3=0.05)
        back = unwrap_corner(wrapped, geom, focus, out_pitch_x1=p1,
                             out_pitch_x3=p3)
        a = flat.pixels[2:-2, 5:-5].astype(float)
        b = back.pixels[2:-2, 5:-5].astype(float)
        assert np.mean(np.abs(a - b)) < 3.0
        assert np.max(np.abs(a - b)) < 25.0

    def test_focus_radius_validation(self, geom):
        img = GrayImage(np.zeros((64, 64)), 0.5, 0.5)
        with pytest.raises(ParameterError):
            unwrap_corner(img, geom, focus_radius=geom.radius - 1.0)


class TestSynthBscan:
    def test_zero_wrinkle(self, geom, basis, decay):
        xi = WrinkleParams(amplitudes=np.zeros(basis.n_modes),
                           length_scale=12.9)
        img, truth = synth_bscan(xi, basis, decay, geom,
                                 pitch_x1=0.2, pitch_x3=0.1)
        assert np.all(truth.phi == 0.0)
        # layers are horizontal: every row is constant
        assert np.all(img.pixels == img.pixels[:, :1])

    def test_truth_matches_model(self, geom, basis, decay, rng):
        xi = WrinkleParams(amplitudes=0.5 * rng.standard_normal(basis.n_modes),
                           length_scale=12.9)
        img, truth = synth_bscan(xi, basis, decay, geom,
                                 pitch_x1=0.2, pitch_x3=0.1)
        assert truth.phi.shape == (img.height, img.width)
        assert np.max(np.abs(truth.phi)) > 0.001
        # a ply drawn through the image follows z = z0 + W(x1, z0): the
        # rendered gray at (x1, z0 + W) equals the flat profile at z0
        assert img.pixels.dtype == np.uint8

    def test_noise_requires_rng(self, geom, basis, decay):
        xi = WrinkleParams(amplitudes=np.zeros(basis.n_modes),
                           length_scale=12.9)
        with pytest.raises(ParameterError):
            synth_bscan(xi, basis, decay, geom, 0.2, 0.1, noise_sigma=2.0)

    def test_inadmissible_rejected(self, geom, basis, decay):
        xi = WrinkleParams(amplitudes=np.full(basis.n_modes, 50.0),
                           length_scale=12.9)
        with pytest.raises(ParameterError):
            synth_bscan(xi, basis, decay, geom, 0.2, 0.1)

    def test_truth_interp_and_samples(self, geom, basis, decay, rng):
        xi = WrinkleParams(amplitudes=0.3 * rng.standard_normal(basis.n_modes),
                           length_scale=12.9)
        _, truth = synth_bscan(xi, basis, decay, geom, 0.2, 0.1)
        v = truth.interp(truth.x1[5], truth.x3[7])
        assert v[0] == pytest.approx(truth.phi[7, 5])
        s = truth.to_samples()
        assert len(s) == truth.phi.size
