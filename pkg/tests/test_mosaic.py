"""Tests for DLT/RANSAC homography estimation and panorama compositing."""

import numpy as np
import pytest

from patchdesc.errors import (GeometryError, NumericalError, ParameterError)
from patchdesc.imgproc import apply_homography, warp
from patchdesc.mosaic import (chain_homographies, compose_panorama,
                              estimate_homography_dlt, ransac_homography)
from patchdesc.util import make_rng


def projective_h():
    """A well-conditioned homography with a genuine projective part."""
    return np.array([[0.95, -0.12, 14.0],
                     [0.10, 1.05, -7.0],
                     [1.5e-4, -8e-5, 1.0]])


def grid_points(x0, x1, y0, y1, nx=4, ny=3):
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    return np.array([[x, y] for y in ys for x in xs])


class TestEstimateHomographyDLT:
    def test_recovers_exact_homography(self):
        h_true = projective_h()
        src = grid_points(0, 320, 0, 240, nx=5, ny=4)
        dst = apply_homography(h_true, src)
        h = estimate_homography_dlt(src, dst)
        np.testing.assert_allclose(h, h_true, atol=1e-9)
        assert h[2, 2] == 1.0

    def test_minimal_sample_maps_points_exactly(self):
        src = np.array([[0.0, 0], [100, 0], [100, 80], [0, 80]])
        dst = np.array([[3.0, 2], [97, -1], [104, 85], [-2, 78]])
        h = estimate_homography_dlt(src, dst)
        np.testing.assert_allclose(apply_homography(h, src), dst, atol=1e-9)

    def test_collinear_minimal_sample_rejected(self):
        src = np.array([[0.0, 0], [10, 10], [20, 20], [5, 30]])
        dst = grid_points(0, 10, 0, 10, nx=2, ny=2)
        with pytest.raises(GeometryError):
            estimate_homography_dlt(src, dst)

    def test_coincident_points_rejected(self):
        pts = np.zeros((4, 2))
        with pytest.raises(GeometryError):
            estimate_homography_dlt(pts, pts)

    def test_too_few_points_rejected(self):
        pts = grid_points(0, 10, 0, 10, nx=3, ny=1)
        with pytest.raises(ParameterError):
            estimate_homography_dlt(pts, pts)

    def test_count_mismatch_rejected(self):
        with pytest.raises(ParameterError):
            estimate_homography_dlt(grid_points(0, 1, 0, 1, 2, 2),
                                    grid_points(0, 1, 0, 1, 2, 3))

    def test_nonfinite_rejected(self):
        src = grid_points(0, 10, 0, 10, 2, 2).copy()
        src[0, 0] = np.inf
        with pytest.raises(ParameterError):
            estimate_homography_dlt(src, src)

    def test_bad_shape_rejected(self):
        with pytest.raises(ParameterError):
            estimate_homography_dlt(np.zeros((4, 3)), np.zeros((4, 3)))

    def test_translation_invariance_of_fit(self):
        # Hartley normalization keeps the fit stable far from the origin
        h_true = projective_h()
        src = grid_points(5000, 5400, 7000, 7300, nx=4, ny=4)
        dst = apply_homography(h_true, src)
        h = estimate_homography_dlt(src, dst)
        np.testing.assert_allclose(apply_homography(h, src), dst, atol=1e-6)


class TestRansacHomography:
    def corrupted_set(self, seed, n_in=70, n_out=30):
        rng = make_rng(seed)
        h_true = projective_h()
        src = rng.uniform([0, 0], [720, 576], size=(n_in + n_out, 2))
        dst = apply_homography(h_true, src)
        dst[n_in:] += rng.uniform(20, 80, size=(n_out, 2)) * np.where(
            rng.random((n_out, 2)) < 0.5, -1.0, 1.0)
        return h_true, src, dst

    def test_rejects_outliers_and_recovers(self):
        for seed in (0, 1):
            h_true, src, dst = self.corrupted_set(seed)
            h, mask = ransac_homography(src, dst, seed=seed)
            corners = np.array([[0.0, 0], [719, 0], [719, 575], [0, 575]])
            err = np.linalg.norm(apply_homography(h, corners)
                                 - apply_homography(h_true, corners), axis=1)
            assert err.max() < 1.0
            assert mask[:70].all()

    def test_zero_outliers_equals_full_dlt(self):
        h_true = projective_h()
        src = grid_points(10, 700, 10, 560, nx=6, ny=5)
        dst = apply_homography(h_true, src)
        h, mask = ransac_homography(src, dst, seed=3)
        assert mask.all()
        np.testing.assert_array_equal(h, estimate_homography_dlt(src, dst))

    def test_four_points_waive_consensus_floor(self):
        src = np.array([[0.0, 0], [100, 0], [100, 80], [0, 80]])
        dst = src + np.array([5.0, -3.0])
        h, mask = ransac_homography(src, dst)
        assert mask.all() and mask.shape == (4,)
        np.testing.assert_allclose(apply_homography(h, src), dst, atol=1e-9)

    def test_four_degenerate_points_raise(self):
        src = np.array([[0.0, 0], [10, 10], [20, 20], [5, 30]])
        with pytest.raises(GeometryError):
            ransac_homography(src, src + 1.0)

    def test_no_consensus_raises(self):
        rng = make_rng(7)
        src = rng.uniform(0, 1000, size=(50, 2))
        dst = rng.uniform(0, 1000, size=(50, 2))
        with pytest.raises(NumericalError, match="consensus"):
            ransac_homography(src, dst, iters=100, inlier_px=0.05, seed=7)

    def test_deterministic_for_seed(self):
        _, src, dst = self.corrupted_set(2)
        h1, m1 = ransac_homography(src, dst, seed=5)
        h2, m2 = ransac_homography(src, dst, seed=5)
        np.testing.assert_array_equal(h1, h2)
        np.testing.assert_array_equal(m1, m2)

    def test_too_few_points_rejected(self):
        pts = np.zeros((3, 2))
        with pytest.raises(ParameterError):
            ransac_homography(pts, pts)


class TestChainHomographies:
    def pairwise_set(self):
        return [np.array([[1.0, 0, -40], [0, 1, 2], [0, 0, 1]]),
                np.array([[0.98, -0.05, -35.0], [0.05, 0.98, -3], [0, 0, 1]]),
                np.array([[1.02, 0.01, -45.0], [-0.01, 1.0, 5], [0, 0, 1]])]

    def test_identity_chain(self):
        out = chain_homographies([np.eye(3)] * 3, reference=0)
        for g in out:
            np.testing.assert_allclose(g, np.eye(3), atol=1e-12)

    def test_reference_frame_gets_identity(self):
        for ref in range(4):
            out = chain_homographies(self.pairwise_set(), reference=ref)
            np.testing.assert_allclose(out[ref], np.eye(3))

    def test_globals_compose_pairwise(self):
        pw = self.pairwise_set()
        for ref in (0, 2, 3):
            out = chain_homographies(pw, reference=ref)
            for k, p in enumerate(pw):
                lhs = out[k + 1] @ p
                lhs /= lhs[2, 2]
                np.testing.assert_allclose(lhs, out[k], atol=1e-9)

    def test_forward_chain_matches_inverse_products(self):
        pw = self.pairwise_set()
        out = chain_homographies(pw, reference=0)
        acc = np.eye(3)
        for k, p in enumerate(pw):
            acc = acc @ np.linalg.inv(p)
            expect = acc / acc[2, 2]
            np.testing.assert_allclose(out[k + 1], expect, atol=1e-12)

    def test_bad_reference_rejected(self):
        with pytest.raises(ParameterError):
            chain_homographies(self.pairwise_set(), reference=4)
        with pytest.raises(ParameterError):
            chain_homographies(self.pairwise_set(), reference=-1)


class TestComposePanorama:
    def mother_image(self):
        rng = make_rng(31)
        return rng.random((120, 300), dtype=np.float32)

    def overlapping_crops(self):
        im = self.mother_image()
        f0 = im[:, :200].copy()
        f1 = im[:, 100:300].copy()
        # frame-0 x maps to frame-1 x - 100
        src = grid_points(110, 190, 10, 110, nx=4, ny=4)
        dst = src - np.array([100.0, 0.0])
        return im, f0, f1, [(src, dst)]

    def test_translation_pair_reconstructs_scene(self):
        im, f0, f1, corr = self.overlapping_crops()
        pano = compose_panorama([f0, f1], corr, reference=0, iters=300)
        assert pano.canvas.shape == (120, 300)
        assert pano.origin == (0.0, 0.0)
        # estimation roundoff may cost border slivers, nothing more
        assert pano.coverage.mean() > 0.99
        np.testing.assert_allclose(pano.homographies[0], np.eye(3))
        np.testing.assert_allclose(pano.canvas[pano.coverage],
                                   im[pano.coverage], atol=1e-4)

    def test_overwrite_blend_matches_scene_too(self):
        im, f0, f1, corr = self.overlapping_crops()
        pano = compose_panorama([f0, f1], corr, blend="overwrite", iters=300)
        np.testing.assert_allclose(pano.canvas[pano.coverage],
                                   im[pano.coverage], atol=1e-4)

    def test_reference_one_shifts_origin(self):
        im, f0, f1, corr = self.overlapping_crops()
        pano = compose_panorama([f0, f1], corr, reference=1, iters=300)
        # frame 1's x = 0 sits at mother x = 100, so the canvas starts
        # 100 px left of the reference origin
        assert pano.origin[0] == pytest.approx(-100.0, abs=1e-6)
        assert pano.coverage.mean() > 0.99
        np.testing.assert_allclose(pano.canvas[pano.coverage],
                                   im[pano.coverage], atol=1e-4)

    def test_rotated_pair_leaves_uncovered_corners(self):
        rng = make_rng(8)
        f0 = rng.random((120, 160), dtype=np.float32)
        c, s = np.cos(0.2), np.sin(0.2)
        cx, cy = 79.5, 59.5
        rot = np.array([[c, -s, cx - c * cx + s * cy],
                        [s, c, cy - s * cx - c * cy],
                        [0, 0, 1.0]])
        f1, _ = warp(f0, rot, out_width=160, out_height=120)
        src = grid_points(40, 120, 30, 90, nx=4, ny=3)
        pano = compose_panorama([f0, f1],
                                [(src, apply_homography(rot, src))],
                                iters=300)
        assert not pano.coverage.all()
        assert np.all(pano.canvas[~pano.coverage] == 0.0)

    def test_chain_consistency_three_frames(self):
        # exact correspondences: the recovered chain must equal the
        # composed pairwise transforms to tight tolerance
        rng = make_rng(9)
        frames = [rng.random((100, 140), dtype=np.float32) for _ in range(3)]
        pw = [np.array([[1.0, 0, -50], [0, 1, 4], [0, 0, 1]]),
              np.array([[0.99, -0.03, -45.0], [0.03, 0.99, -2], [0, 0, 1]])]
        corr = []
        for p in pw:
            src = grid_points(20, 120, 10, 90, nx=4, ny=4)
            corr.append((src, apply_homography(p, src)))
        pano = compose_panorama(frames, corr, reference=0)
        acc = np.eye(3)
        for k, p in enumerate(pw):
            acc = acc @ np.linalg.inv(p)
            np.testing.assert_allclose(pano.homographies[k + 1],
                                       acc / acc[2, 2], atol=1e-6)

    def test_failed_pair_named_in_error(self):
        im, f0, f1, corr = self.overlapping_crops()
        rng = make_rng(10)
        bad = (rng.uniform(0, 100, (40, 2)), rng.uniform(0, 100, (40, 2)))
        with pytest.raises(NumericalError, match=r"frames \(1, 2\)"):
            compose_panorama([f0, f1, f1], corr + [bad], iters=50)

    def test_input_validation(self):
        im, f0, f1, corr = self.overlapping_crops()
        with pytest.raises(ParameterError):
            compose_panorama([], [])
        with pytest.raises(ParameterError):
            compose_panorama([f0, f1], [])
        with pytest.raises(ParameterError):
            compose_panorama([f0, f1], corr, blend="poisson")
