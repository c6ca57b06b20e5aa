import numpy as np
import pytest

from srisp.metrics import (
    EvalReport,
    HistogramSet,
    angular_error,
    histogram_intersection,
    psnr,
    raw_to_lab,
    split_protocol,
)


class TestPsnr:
    def test_identical_images_hit_cap(self):
        x = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert psnr(x, x) == 99.0

    def test_known_mse(self):
        a = np.zeros((10, 10, 3))
        b = np.full_like(a, 0.1)  # MSE = 0.01 -> 20 dB
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-4)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4, 3))
        assert psnr(a, b) == pytest.approx(psnr(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))


class TestAngularError:
    def test_identical(self):
        x = np.random.default_rng(0).uniform(0.1, 1, (8, 8, 3))
        assert angular_error(x, x) == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal(self):
        a = np.tile([1.0, 0.0, 0.0], (4, 4, 1))
        b = np.tile([0.0, 1.0, 0.0], (4, 4, 1))
        assert angular_error(a, b) == pytest.approx(90.0, abs=1e-4)

    def test_45_degrees(self):
        a = np.tile([1.0, 0.0, 0.0], (4, 4, 1))
        b = np.tile([1.0, 1.0, 0.0], (4, 4, 1))
        assert angular_error(a, b) == pytest.approx(45.0, abs=1e-4)

    def test_scale_invariant(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0.1, 1, (6, 6, 3))
        b = rng.uniform(0.1, 1, (6, 6, 3))
        assert angular_error(3.7 * a, b) == pytest.approx(angular_error(a, b), abs=1e-9)

    def test_zero_norm_pixels_excluded(self):
        a = np.tile([1.0, 0.0, 0.0], (2, 2, 1))
        b = a.copy()
        a[0, 0] = 0.0
        assert angular_error(a, b) == pytest.approx(0.0, abs=1e-6)

    def test_all_zero_raises(self):
        z = np.zeros((2, 2, 3))
        with pytest.raises(ValueError):
            angular_error(z, z)


class TestLab:
    def test_white_point(self):
        # CCM mapping RAW white to the D65 white point -> L=100, a=b=0
        ccm = np.diag([0.95047, 1.0, 1.08883])
        raw = np.ones((2, 2, 3))
        lab = raw_to_lab(raw, ccm.T)
        np.testing.assert_allclose(lab[0, 0], [100.0, 0.0, 0.0], atol=0.5)

    def test_black(self):
        lab = raw_to_lab(np.zeros((2, 2, 3)), np.eye(3))
        np.testing.assert_allclose(lab[0, 0], [0.0, 0.0, 0.0], atol=1e-6)

    def test_midgray_against_reference_formula(self):
        # independent evaluation of the CIE formulas for XYZ = (0.2,0.2,0.2)
        xyz = np.array([0.2, 0.2, 0.2])
        wn = np.array([0.95047, 1.0, 1.08883])
        f = np.cbrt(xyz / wn)
        expected = [116 * f[1] - 16, 500 * (f[0] - f[1]), 200 * (f[1] - f[2])]
        raw = np.full((1, 1, 3), 0.2)
        lab = raw_to_lab(raw, np.eye(3))
        np.testing.assert_allclose(lab[0, 0], expected, atol=1e-9)

    def test_singular_ccm_rejected(self):
        with pytest.raises(ValueError):
            raw_to_lab(np.ones((2, 2, 3)), np.zeros((3, 3)))


class TestHistograms:
    def test_identical_sets_give_one(self):
        rng = np.random.default_rng(3)
        lab = rng.uniform(-100, 100, (16, 16, 3))
        h = HistogramSet.from_lab(lab)
        assert histogram_intersection(h, h) == pytest.approx(1.0)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        labs = [rng.uniform(-120, 120, (4, 4, 3)) for _ in range(3)]
        for a in labs:
            for b in labs:
                ha, hb = HistogramSet.from_lab(a), HistogramSet.from_lab(b)
                got = histogram_intersection(ha, hb)
                edges = np.linspace(-150, 150, 513)
                acc = 0.0
                for c in range(3):
                    ca, _ = np.histogram(a[..., c].ravel(), bins=edges)
                    cb, _ = np.histogram(b[..., c].ravel(), bins=edges)
                    acc += np.minimum(ca / 16, cb / 16).sum()
                assert got == pytest.approx(acc / 3, abs=1e-6)

    def test_unequal_counts_density_normalized(self):
        rng = np.random.default_rng(5)
        lab = rng.uniform(-50, 50, (8, 8, 3))
        big = np.concatenate([lab, lab], axis=0)  # same distribution, 2x pixels
        hi = histogram_intersection(HistogramSet.from_lab(lab), HistogramSet.from_lab(big))
        assert hi == pytest.approx(1.0)

    def test_binning_mismatch_rejected(self):
        lab = np.zeros((2, 2, 3))
        a = HistogramSet.from_lab(lab)
        b = HistogramSet.from_lab(lab, bins=256)
        with pytest.raises(ValueError):
            histogram_intersection(a, b)

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        a = HistogramSet.from_lab(rng.uniform(-90, 90, (8, 8, 3)))
        b = HistogramSet.from_lab(rng.uniform(-90, 90, (8, 8, 3)))
        assert histogram_intersection(a, b) == pytest.approx(histogram_intersection(b, a))


class TestSplitProtocol:
    def test_landscape_sizes(self):
        img = np.random.default_rng(7).uniform(size=(256, 512, 3))
        ref, top, bottom = split_protocol(img)
        assert ref.shape == (256, 256, 3)
        assert top.shape == (128, 256, 3)
        assert bottom.shape == (128, 256, 3)

    def test_portrait_rotated_first(self):
        img = np.random.default_rng(8).uniform(size=(512, 256, 3))
        ref, top, bottom = split_protocol(img)
        assert ref.shape == (256, 256, 3)

    def test_exact_reassembly(self):
        img = np.random.default_rng(9).uniform(size=(64, 128, 3))
        ref, top, bottom = split_protocol(img)
        right = np.concatenate([top, bottom], axis=0)
        np.testing.assert_array_equal(np.concatenate([ref, right], axis=1), img)

    def test_too_narrow(self):
        with pytest.raises(ValueError):
            split_protocol(np.zeros((2, 2, 3)))


class TestEvalReport:
    def test_summary_and_export(self, tmp_path):
        r = EvalReport()
        r.add("a", psnr=30.0, angular_error=2.0)
        r.add("b", psnr=40.0, angular_error=4.0)
        assert r.summary() == {"psnr": 35.0, "angular_error": 3.0}
        r.save_json(tmp_path / "r.json")
        r.save_csv(tmp_path / "r.csv")
        assert (tmp_path / "r.json").exists()
        assert "psnr" in (tmp_path / "r.csv").read_text()
