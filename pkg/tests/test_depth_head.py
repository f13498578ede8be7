import numpy as np
import pytest

from casrf import autodiff as ad
from casrf.autodiff import Tensor
from casrf.cameras import Camera
from casrf.depth_head import (mvs_loss, predict_depth, smoothness_loss,
                              ssim_loss_map, warp_with_depth)
from casrf.model import ModelConfig, build_params
from casrf.volume import build_hypotheses, build_raw_volume

from oracles import check_grad
from test_volume import simple_camera

rng = np.random.default_rng(23)

CFG = ModelConfig()


def plane_texture(cam, dstar, amp=1.0, channels=3):
    """Analytic view of an infinite textured plane z = dstar.

    Several incommensurate sinusoids per channel so the pattern does not
    repeat over the visible extent (periodic textures alias in depth).
    """
    h, w = cam.height, cam.width
    xs = (np.arange(w) + 0.5 - cam.K[0, 2]) / cam.K[0, 0]
    ys = (np.arange(h) + 0.5 - cam.K[1, 2]) / cam.K[1, 1]
    X = cam.center[0] + dstar * xs[None, :] * np.ones((h, 1))
    Y = cam.center[1] + dstar * ys[:, None] * np.ones((1, w))
    trng = np.random.default_rng(7)
    chans = []
    for _ in range(channels):
        acc = np.zeros((h, w))
        for _ in range(4):
            fx, fy = trng.uniform(1.0, 6.0, 2)
            ph = trng.uniform(0.0, 2 * np.pi)
            acc += np.sin(fx * X + fy * Y + ph)
        chans.append(amp * acc / 2.0)
    return np.stack(chans)


class TestPredictDepth:
    def test_uniform_logits(self):
        store = build_params(ModelConfig(seed=2))
        store["head.l2.proj.w"].values[:] = 0.0
        store["head.l2.proj.b"].values[:] = 0.0
        d, h, w = 32, 3, 4
        hyp = np.linspace(2.0, 6.0, d)[:, None, None] * np.ones((d, h, w))
        vol = Tensor(rng.random((8, d, h, w)))
        pred = predict_depth(store, 2, vol, hyp)
        np.testing.assert_allclose(pred.depth.values, hyp.mean(axis=0),
                                   atol=1e-12)
        np.testing.assert_allclose(pred.confidence.values, 1.0 / d,
                                   atol=1e-12)

    def test_one_hot_spike(self):
        store = build_params(ModelConfig(seed=2))
        store["head.l3.proj.w"].values[:] = 1.0
        store["head.l3.proj.b"].values[:] = 0.0
        d, h, w = 8, 2, 3
        hyp = np.linspace(3.0, 5.0, d)[:, None, None] * np.ones((d, h, w))
        vol = np.zeros((8, d, h, w))
        vol[:, 5] = 10.0    # summed over channels: logit 80 at slice 5
        pred = predict_depth(store, 3, vol if isinstance(vol, Tensor)
                             else Tensor(vol), hyp)
        np.testing.assert_allclose(pred.depth.values, hyp[5], atol=1e-9)
        np.testing.assert_allclose(pred.confidence.values, 1.0, atol=1e-9)

    def test_prob_normalized_and_bounds(self):
        store = build_params(ModelConfig(seed=2))
        d, h, w = 16, 4, 5
        lo = rng.uniform(1.0, 2.0, (h, w))
        hyp = lo + rng.uniform(0.5, 3.0, (h, w)) * \
            np.arange(d)[:, None, None] / (d - 1)
        vol = Tensor(rng.standard_normal((8, d, h, w)))
        pred = predict_depth(store, 1, vol, hyp)
        np.testing.assert_allclose(pred.prob.values.sum(axis=0), 1.0,
                                   atol=1e-6)
        assert (pred.depth.values >= hyp.min(axis=0) - 1e-12).all()
        assert (pred.depth.values <= hyp.max(axis=0) + 1e-12).all()
        assert (pred.confidence.values >= 1.0 / d - 1e-12).all()
        assert (pred.confidence.values <= 1.0 + 1e-12).all()

    def test_plane_depth_from_negated_variance(self):
        # untrained head with weight -1, bias 0: low variance slices win,
        # so the soft-argmax lands near the true plane depth
        dstar = 3.0
        h, w = 16, 20
        ref = simple_camera(f=20.0, w=w, h=h)
        srcs = [simple_camera(tx=tx, ty=ty, f=20.0, w=w, h=h)
                for tx, ty in ((0.8, 0.0), (-0.6, 0.3), (0.2, -0.7))]
        feats = [Tensor(plane_texture(c, dstar, amp=3.0, channels=8))
                 for c in srcs]
        hyp = build_hypotheses(CFG, 1, 2.0, 6.0, h, w)
        vol, valid = build_raw_volume(CFG, ref, srcs, feats, hyp)
        store = build_params(ModelConfig(seed=2))
        store["head.l1.proj.w"].values[:] = -1.0
        store["head.l1.proj.b"].values[:] = 0.0
        pred = predict_depth(store, 1, vol, hyp)
        spacing = 4.0 / 47
        err = np.abs(pred.depth.values - dstar)[valid.all(axis=0)]
        assert err.size > 0.5 * h * w
        assert np.median(err) < 1.5 * spacing


class TestSsim:
    def test_identity_is_zero_loss(self):
        img = Tensor(rng.random((3, 10, 12)))
        loss = ssim_loss_map(img, img)
        np.testing.assert_allclose(loss.values, 0.0, atol=1e-12)

    def test_symmetry(self):
        a = Tensor(rng.random((2, 8, 9)))
        b = Tensor(rng.random((2, 8, 9)))
        ab = ssim_loss_map(a, b).values
        ba = ssim_loss_map(b, a).values
        np.testing.assert_allclose(ab, ba, atol=1e-9)

    def test_range_and_shape(self):
        a = Tensor(rng.random((3, 8, 8)))
        b = Tensor(rng.random((3, 8, 8)))
        loss = ssim_loss_map(a, b).values
        assert loss.shape == (3, 6, 6)
        assert (loss >= -1e-9).all() and (loss <= 1.0 + 1e-9).all()


class TestWarp:
    def test_self_warp_is_identity(self):
        cam = simple_camera(f=12.0, w=10, h=8)
        img = rng.random((3, 8, 10))
        depth = Tensor(rng.uniform(2.5, 5.5, (8, 10)))
        warped, valid = warp_with_depth(img, depth, cam, cam)
        assert valid.all()
        np.testing.assert_allclose(warped.values, img, atol=1e-12)

    def test_behind_camera_invalid(self):
        ref = simple_camera(f=12.0, w=8, h=6)
        src = simple_camera(yaw=np.pi, f=12.0, w=8, h=6)
        depth = Tensor(np.full((6, 8), 4.0))
        _, valid = warp_with_depth(rng.random((3, 6, 8)), depth, ref, src)
        assert not valid.any()


class TestMvsLoss:
    def _plane_setup(self, dstar=4.0, h=12, w=16, offsets=(0.6, -0.6)):
        ref = simple_camera(f=16.0, w=w, h=h)
        srcs = [simple_camera(tx=o, f=16.0, w=w, h=h) for o in offsets]
        scale = lambda img: 0.5 + 0.5 * np.tanh(img)  # keep values in [0,1]
        ref_img = scale(plane_texture(ref, dstar, amp=2.0))
        src_imgs = [scale(plane_texture(c, dstar, amp=2.0)) for c in srcs]
        return ref, srcs, ref_img, src_imgs

    def test_self_view_perfect_depth_zero_photometric(self):
        cam = simple_camera(f=12.0, w=10, h=8)
        img = rng.random((3, 8, 10))
        depth = Tensor(rng.uniform(2.5, 5.5, (8, 10)))
        loss, parts, flag = mvs_loss(img, [img], cam, [cam], depth)
        assert not flag
        assert abs(parts["pc"]) < 1e-12
        assert abs(parts["ssim"]) < 1e-12

    def test_constant_depth_constant_image_zero_smoothness(self):
        depth = Tensor(np.full((6, 8), 3.0))
        img = np.full((3, 6, 8), 0.5)
        np.testing.assert_allclose(smoothness_loss(depth, img).values, 0.0,
                                   atol=1e-12)

    def test_plane_depth_perturbation_increases_photometric(self):
        ref, srcs, ref_img, src_imgs = self._plane_setup()
        good = Tensor(np.full((12, 16), 4.0))
        bad = Tensor(np.full((12, 16), 4.0 * 1.1))
        _, parts_good, _ = mvs_loss(ref_img, src_imgs, ref, srcs, good)
        _, parts_bad, _ = mvs_loss(ref_img, src_imgs, ref, srcs, bad)
        assert parts_bad["pc"] > parts_good["pc"]

    def test_no_valid_pixels_returns_zero_with_flag(self):
        ref = simple_camera(f=12.0, w=8, h=6)
        src = simple_camera(yaw=np.pi, f=12.0, w=8, h=6)
        depth = Tensor(np.full((6, 8), 4.0))
        loss, parts, flag = mvs_loss(rng.random((3, 6, 8)),
                                     [rng.random((3, 6, 8))], ref, [src],
                                     depth)
        assert flag
        assert float(loss.values) == 0.0
        assert parts == {"pc": 0.0, "ssim": 0.0, "smooth": 0.0}

    def test_gradient_matches_finite_differences(self):
        ref, srcs, ref_img, src_imgs = self._plane_setup(h=8, w=8,
                                                         offsets=(0.3,))
        depth0 = np.full((8, 8), 4.0) + rng.uniform(-0.05, 0.05, (8, 8))

        def build(t):
            return mvs_loss(ref_img, src_imgs, ref, srcs, t)[0]

        check_grad(build, depth0, eps=1e-5, rtol=1e-3, atol=1e-8)
