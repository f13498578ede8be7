import numpy as np
import pytest

from casrf.errors import EmptyCloudError, EmptyMaskError, ShapeError
from casrf.metrics import (depth_metrics, fuse_depths, point_metrics, psnr,
                           ssim)

from test_volume import simple_camera

rng = np.random.default_rng(61)


class TestPsnr:
    def test_identical_images_sentinel(self):
        img = rng.random((3, 8, 8))
        assert psnr(img, img) == np.inf

    def test_constant_offset_closed_form(self):
        a = np.zeros((3, 10, 10))
        b = np.full((3, 10, 10), 0.5)
        np.testing.assert_allclose(psnr(a, b), 10 * np.log10(4.0),
                                   atol=1e-12)

    def test_matches_direct_formula(self):
        for _ in range(100):
            a = rng.random((3, 6, 7))
            b = rng.random((3, 6, 7))
            want = 10 * np.log10(1.0 / np.mean((a - b) ** 2))
            np.testing.assert_allclose(psnr(a, b), want, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


class TestSsim:
    def test_self_similarity_is_one(self):
        img = rng.random((3, 24, 24))
        np.testing.assert_allclose(ssim(img, img), 1.0, atol=1e-12)

    def test_symmetry(self):
        a = rng.random((24, 24))
        b = rng.random((24, 24))
        np.testing.assert_allclose(ssim(a, b), ssim(b, a), atol=1e-9)

    def test_constant_images_luminance_closed_form(self):
        c = 0.4
        a = np.full((16, 16), c)
        b = np.full((16, 16), c + 0.1)
        c1 = 0.01 ** 2
        want = (2 * c * (c + 0.1) + c1) / (c ** 2 + (c + 0.1) ** 2 + c1)
        np.testing.assert_allclose(ssim(a, b), want, atol=1e-9)

    def test_channel_mean(self):
        a = rng.random((3, 16, 16))
        b = rng.random((3, 16, 16))
        per = [ssim(a[i], b[i]) for i in range(3)]
        np.testing.assert_allclose(ssim(a, b), np.mean(per), atol=1e-12)

    def test_bounded_above_by_one(self):
        a = rng.random((20, 20))
        b = np.clip(a + 0.05 * rng.standard_normal((20, 20)), 0, 1)
        assert ssim(a, b) <= 1.0


class TestDepthMetrics:
    def test_perfect_prediction(self):
        gt = rng.uniform(2.0, 6.0, (8, 10))
        mask = np.ones((8, 10), bool)
        abs_err, acc = depth_metrics(gt, gt, mask, [0.01, 0.1])
        assert abs_err == 0.0
        assert acc[0.01] == 1.0 and acc[0.1] == 1.0

    def test_uniform_offset(self):
        gt = rng.uniform(2.0, 6.0, (8, 10))
        span = 4.0
        pred = gt + 0.01 * span
        mask = np.ones((8, 10), bool)
        abs_err, acc = depth_metrics(pred, gt, mask,
                                     [0.005 * span, 0.02 * span])
        np.testing.assert_allclose(abs_err, 0.01 * span, atol=1e-12)
        assert acc[0.005 * span] == 0.0
        assert acc[0.02 * span] == 1.0

    def test_matches_scalar_loop_oracle(self):
        pred = rng.uniform(2.0, 6.0, (6, 7))
        gt = rng.uniform(2.0, 6.0, (6, 7))
        mask = rng.random((6, 7)) > 0.4
        taus = [0.1, 0.5, 2.0]
        abs_err, acc = depth_metrics(pred, gt, mask, taus)
        errs = []
        for y in range(6):
            for x in range(7):
                if mask[y, x]:
                    errs.append(abs(pred[y, x] - gt[y, x]))
        np.testing.assert_allclose(abs_err, np.mean(errs), atol=1e-12)
        for t in taus:
            want = np.mean([e < t for e in errs])
            np.testing.assert_allclose(acc[t], want, atol=1e-12)

    def test_accuracy_monotone_in_threshold(self):
        pred = rng.uniform(2.0, 6.0, (10, 10))
        gt = rng.uniform(2.0, 6.0, (10, 10))
        taus = [0.05, 0.1, 0.5, 1.0, 3.0]
        _, acc = depth_metrics(pred, gt, np.ones((10, 10), bool), taus)
        vals = [acc[t] for t in taus]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_empty_mask(self):
        d = np.ones((4, 4))
        with pytest.raises(EmptyMaskError):
            depth_metrics(d, d, np.zeros((4, 4), bool), [0.1])


def plane_views(n=3, offsets=(0.0, 0.37, -0.29), h=8, w=10, d0=4.0,
                gx=0.1):
    """Views of the tilted plane z = d0 + gx*x with exact depth maps."""
    f = 12.0
    views = []
    for i in range(n):
        c = simple_camera(tx=offsets[i], f=f, w=w, h=h)
        u = np.arange(w) + 0.5
        # solve d = d0 + gx*(tx + (u - cx)/f * d) for the z-depth map
        row = (d0 + gx * offsets[i]) / (1.0 - gx * (u - w / 2) / f)
        views.append((np.tile(row, (h, 1)), None, c))
    return views


def plane_residual(pts, d0=4.0, gx=0.1):
    return np.abs(pts[:, 2] - (d0 + gx * pts[:, 0]))


class TestFuseDepths:
    def test_identical_views_all_survive(self):
        c = simple_camera(f=12.0, w=10, h=8)
        depth = np.full((8, 10), 4.0)
        views = [(depth.copy(), None, c) for _ in range(3)]
        pts, cols = fuse_depths(views)
        assert len(pts) == 3 * 80      # one point per unmasked pixel
        np.testing.assert_allclose(pts[:, 2], 4.0, atol=1e-9)

    def test_consistent_plane_survives_everywhere(self):
        views = plane_views()
        pts, _ = fuse_depths(views)
        assert len(pts) > 0
        assert (plane_residual(pts) < 1e-9).all()

    def test_corrupted_view_pixels_dropped(self):
        views = plane_views(n=4, offsets=(0.0, 0.37, -0.29, 0.18))
        clean_count = len(fuse_depths(views)[0])
        bad = views[0][0].copy()
        bad[2:5, 3:7] = 5.5
        views_bad = [(bad, None, views[0][2])] + list(views[1:])
        pts, _ = fuse_depths(views_bad)
        assert (plane_residual(pts) < 0.1).all()
        assert len(pts) < clean_count

    def test_confidence_gate(self):
        views = plane_views()
        conf = np.ones((8, 10))
        conf[:, :5] = 0.2
        gated = [(views[0][0], conf, views[0][2])] + list(views[1:])
        pts_all = fuse_depths(views)[0]
        pts_gated = fuse_depths(gated)[0]
        assert len(pts_gated) < len(pts_all)

    def test_point_count_bounded(self):
        views = plane_views()
        pts, cols = fuse_depths(views)
        assert len(pts) <= sum(v[0].size for v in views)
        assert len(cols) == len(pts)

    def test_view_order_invariance(self):
        views = plane_views()
        a, _ = fuse_depths(views)
        b, _ = fuse_depths(views[::-1])
        assert a.shape == b.shape
        np.testing.assert_allclose(np.sort(a, axis=0), np.sort(b, axis=0),
                                   atol=1e-9)

    def test_needs_two_views(self):
        with pytest.raises(ShapeError):
            fuse_depths(plane_views()[:1])

    def test_colors_from_images(self):
        c = simple_camera(f=12.0, w=6, h=4)
        depth = np.full((4, 6), 4.0)
        views = [(depth.copy(), None, c) for _ in range(2)]
        img = rng.random((3, 4, 6))
        pts, cols = fuse_depths(views, images=[img, img])
        assert cols.shape == (len(pts), 3)
        assert set(map(tuple, cols)) <= set(map(tuple, img.reshape(3, -1).T))


def nearest_loops(queries, targets, cap):
    out = np.empty(len(queries))
    for i, q in enumerate(queries):
        d = np.sqrt(((targets - q) ** 2).sum(axis=1)).min()
        out[i] = min(d, cap)
    return out


class TestPointMetrics:
    def test_identical_clouds(self):
        pts = rng.standard_normal((100, 3))
        assert point_metrics(pts, pts, 1.0) == (0.0, 0.0, 0.0)

    def test_uniform_translation(self):
        g = np.stack(np.meshgrid(*[np.arange(0, 1.0, 0.2)] * 3),
                     axis=-1).reshape(-1, 3)
        t = np.array([0.05, 0.0, 0.0])
        acc, comp, overall = point_metrics(g + t, g, cap=0.5)
        np.testing.assert_allclose([acc, comp, overall], 0.05, atol=1e-12)

    def test_matches_brute_force_oracle(self):
        pred = rng.standard_normal((1000, 3))
        gt = rng.standard_normal((1000, 3)) * 1.5
        cap = 0.4
        acc, comp, overall = point_metrics(pred, gt, cap)
        want_acc = nearest_loops(pred, gt, cap).mean()
        want_comp = nearest_loops(gt, pred, cap).mean()
        np.testing.assert_allclose(acc, want_acc, atol=1e-12)
        np.testing.assert_allclose(comp, want_comp, atol=1e-12)
        np.testing.assert_allclose(overall, (want_acc + want_comp) / 2,
                                   atol=1e-12)

    def test_cap_hits_are_capped(self):
        pred = np.zeros((1, 3))
        gt = np.array([[10.0, 0.0, 0.0]])
        acc, comp, overall = point_metrics(pred, gt, cap=0.25)
        assert acc == 0.25 and comp == 0.25

    def test_acc_comp_symmetry(self):
        a = rng.standard_normal((200, 3))
        b = rng.standard_normal((300, 3))
        m_ab = point_metrics(a, b, 0.7)
        m_ba = point_metrics(b, a, 0.7)
        assert m_ab[0] == m_ba[1]
        assert m_ab[1] == m_ba[0]

    def test_empty_cloud(self):
        with pytest.raises(EmptyCloudError):
            point_metrics(np.zeros((0, 3)), np.ones((5, 3)), 1.0)
