"""Perceptual / style / adversarial losses against naive-loop oracles."""

import numpy as np
import pytest

from texsyn import autodiff as ad
from texsyn.autodiff import grad_check
from texsyn.losses import (
    DiscriminatorConfig,
    DiscriminatorWeights,
    FeatureExtractor,
    LossWeights,
    discriminator_apply,
    discriminator_forward,
    gan_losses,
    gram_matrix,
    perceptual_loss,
    perceptual_loss_t,
    style_loss,
    style_loss_t,
    total_loss,
)
from texsyn.tensor import ShapeError, Tensor


@pytest.fixture(scope="module")
def ext():
    return FeatureExtractor.fixed_random(seed=0)


def rand_img(rng, h=32, w=32):
    return Tensor(rng.random((1, 3, h, w)).astype(np.float32))


def perceptual_oracle(out, target, ext):
    total = 0.0
    for po, pt in zip(ext.pyramid(out), ext.pyramid(target)):
        acc = 0.0
        for idx in np.ndindex(po.shape):
            acc += abs(float(po[idx]) - float(pt[idx]))
        total += acc / po.size
    return total


def gram_oracle(psi):
    n, c, h, w = psi.shape
    g = np.zeros((n, c, c))
    for ni in range(n):
        for c1 in range(c):
            for c2 in range(c):
                for i in range(h):
                    for j in range(w):
                        g[ni, c1, c2] += psi[ni, c1, i, j] * psi[ni, c2, i, j]
    return g


def style_oracle(out, target, ext):
    total = 0.0
    for po, pt in zip(ext.pyramid(out), ext.pyramid(target)):
        n, c, h, w = po.shape
        flat_o = po.reshape(n, c, h * w)
        flat_t = pt.reshape(n, c, h * w)
        go = np.matmul(flat_o, flat_o.transpose(0, 2, 1))
        gt = np.matmul(flat_t, flat_t.transpose(0, 2, 1))
        diff = np.abs((go - gt) / (c * h * w)).sum()
        total += diff / (c * c) / n
    return total


class TestExtractor:
    def test_pyramid_shapes(self, ext, rng):
        levels = ext.pyramid(rand_img(rng, 64, 64))
        assert [lv.shape for lv in levels] == [
            (1, 8, 32, 32), (1, 16, 16, 16), (1, 32, 8, 8), (1, 64, 4, 4), (1, 64, 2, 2)]

    def test_deterministic_by_seed(self, rng):
        a = FeatureExtractor.fixed_random(seed=7)
        b = FeatureExtractor.fixed_random(seed=7)
        img = rand_img(rng)
        assert np.array_equal(a.pyramid(img)[-1], b.pyramid(img)[-1])
        assert a.ident == b.ident

    def test_embed64_dim(self, ext, rng):
        assert ext.embed64(rand_img(rng)).shape == (64,)

    def test_archive_roundtrip(self, ext, rng, tmp_path):
        path = tmp_path / "ext.weights"
        ext.save(path)
        loaded = FeatureExtractor.load(path)
        img = rand_img(rng)
        assert loaded.ident == ext.ident
        for a, b in zip(loaded.pyramid(img), ext.pyramid(img)):
            assert np.array_equal(a, b)

    def test_load_rejects_foreign_names(self, tmp_path):
        from texsyn.archive import ArchiveError, save_archive

        path = tmp_path / "bad.weights"
        save_archive(path, {"nonsense": np.zeros(3, np.float32)})
        with pytest.raises(ArchiveError):
            FeatureExtractor.load(path)


class TestPerceptual:
    def test_identical_is_zero(self, ext, rng):
        img = rand_img(rng)
        assert perceptual_loss(img, img, ext) == 0.0

    def test_symmetric(self, ext, rng):
        a, b = rand_img(rng), rand_img(rng)
        assert np.isclose(perceptual_loss(a, b, ext), perceptual_loss(b, a, ext),
                          rtol=1e-6)

    def test_matches_oracle(self, ext, rng):
        a, b = rand_img(rng, 16, 16), rand_img(rng, 16, 16)
        got = perceptual_loss(a, b, ext)
        want = perceptual_oracle(a, b, ext)
        assert np.isclose(got, want, rtol=1e-5)

    def test_nonnegative(self, ext, rng):
        assert perceptual_loss(rand_img(rng), rand_img(rng), ext) >= 0

    def test_shape_mismatch(self, ext, rng):
        with pytest.raises(ShapeError):
            perceptual_loss(rand_img(rng, 32, 32), rand_img(rng, 64, 64), ext)


class TestGram:
    def test_single_channel_sum_of_squares(self, rng):
        x = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
        g = gram_matrix(Tensor(x))
        assert np.isclose(g[0, 0, 0], (x ** 2).sum(), rtol=1e-6)

    def test_orthogonal_channels_zero_offdiag(self):
        x = np.zeros((1, 2, 2, 2), dtype=np.float32)
        x[0, 0, 0, 0] = 3.0
        x[0, 1, 1, 1] = 2.0
        g = gram_matrix(Tensor(x))
        assert g[0, 0, 1] == 0.0 and g[0, 1, 0] == 0.0

    def test_matches_triple_loop(self, rng):
        x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
        got = gram_matrix(Tensor(x))
        want = gram_oracle(x.astype(np.float64))
        assert np.allclose(got, want, rtol=1e-5, atol=1e-5)

    def test_symmetric_psd(self, ext, rng):
        for psi in ext.pyramid(rand_img(rng)):
            g = gram_matrix(Tensor(psi))[0]
            assert np.abs(g - g.T).max() < 1e-6 * max(1.0, np.abs(g).max())
            eigvals = np.linalg.eigvalsh(g.astype(np.float64))
            assert eigvals.min() >= -1e-5 * max(1.0, eigvals.max())


class TestStyle:
    def test_identical_is_zero(self, ext, rng):
        img = rand_img(rng)
        assert style_loss(img, img, ext) == 0.0

    def test_matches_oracle(self, ext, rng):
        a, b = rand_img(rng), rand_img(rng)
        assert np.isclose(style_loss(a, b, ext), style_oracle(a, b, ext), rtol=1e-5)

    def test_nonnegative(self, ext, rng):
        assert style_loss(rand_img(rng), rand_img(rng), ext) >= 0


class TestTotalLoss:
    def test_unit_parts(self):
        assert total_loss(1.0, 1.0, 1.0) == pytest.approx(120.25)

    def test_zero_parts(self):
        assert total_loss(0.0, 0.0, 0.0) == 0.0

    def test_linearity(self):
        w = LossWeights()
        assert total_loss(2.0, 0.0, 0.0, w) == pytest.approx(2 * w.perceptual)
        assert total_loss(0.0, 3.0, 0.0, w) == pytest.approx(3 * w.style)
        assert total_loss(0.0, 0.0, 5.0, w) == pytest.approx(5 * w.gan)


class TestLossGradients:
    def test_perceptual_grad_wrt_out(self, rng):
        ext64 = FeatureExtractor.fixed_random(seed=0, dtype=np.float64)
        target = rng.random((1, 3, 16, 16))

        def f(tape, lv):
            return perceptual_loss_t(tape, lv["out"], tape.constant(target), ext64)

        report = grad_check(f, {"out": rng.random((1, 3, 16, 16))},
                            step=1e-3, tol=1e-4, coords_per_param=48)
        assert report.passed, report.per_param

    def test_style_grad_wrt_out(self, rng):
        ext64 = FeatureExtractor.fixed_random(seed=0, dtype=np.float64)
        target = rng.random((1, 3, 16, 16))

        def f(tape, lv):
            return style_loss_t(tape, lv["out"], tape.constant(target), ext64)

        report = grad_check(f, {"out": rng.random((1, 3, 16, 16))},
                            step=1e-3, tol=1e-4, coords_per_param=48)
        assert report.passed, report.per_param


class TestDiscriminator:
    def test_output_dims_stride_arithmetic(self, rng):
        cfg = DiscriminatorConfig(width_multiplier=0.25)
        w = DiscriminatorWeights.init(cfg, seed=0)
        pair = Tensor(rng.standard_normal((1, 6, 64, 64)).astype(np.float32))
        out = discriminator_forward(pair, w)
        # 64 -> 32 -> 16 -> 8 -> 4, then the 4x4 pad-1 output conv -> 3
        assert out.dims == (1, 1, 3, 3)

    def test_zero_weights_constant_logits(self, rng):
        cfg = DiscriminatorConfig(width_multiplier=0.25)
        w = DiscriminatorWeights.init(cfg, seed=0)
        for k in w.tensors:
            w.tensors[k] = np.zeros_like(w.tensors[k])
        w.tensors["d0.out.bias"] = np.array([0.75], dtype=np.float32)
        pair = Tensor(rng.standard_normal((1, 6, 32, 32)).astype(np.float32))
        out = discriminator_forward(pair, w)
        assert np.allclose(out.data, 0.75)

    def test_grad_check(self, rng):
        cfg = DiscriminatorConfig(width_multiplier=1.0 / 16.0)
        base = DiscriminatorWeights.init(cfg, seed=1, dtype=np.float64)
        pair = rng.standard_normal((1, 6, 32, 32))

        def f(tape, lv):
            p = {k: lv.get(k, None) or tape.constant(base.tensors[k])
                 for k in base.tensors}
            for k in lv:
                p[k] = lv[k]
            out = discriminator_apply(tape, lv["pair"], p, cfg)
            return ad.mean_all(ad.square(out))

        # five stacked convs with leaky-ReLU kinks: probe at 1e-5 so the
        # central difference measures the gradient rather than the kinks
        params = {"pair": pair, "d0.conv0.weight": base.tensors["d0.conv0.weight"],
                  "d0.out.weight": base.tensors["d0.out.weight"],
                  "d0.conv2.bias": base.tensors["d0.conv2.bias"]}
        report = grad_check(f, params, step=1e-5, tol=1e-4, coords_per_param=16)
        assert report.passed, report.per_param


class TestGanLosses:
    def _setup(self, rng, mult=0.25, h=32):
        cfg = DiscriminatorConfig(width_multiplier=mult)
        w = DiscriminatorWeights.init(cfg, seed=0)
        out = Tensor(rng.random((1, 3, 2 * h, 2 * h)).astype(np.float32))
        target = Tensor(rng.random((1, 3, 2 * h, 2 * h)).astype(np.float32))
        inp = Tensor(rng.random((1, 3, h, h)).astype(np.float32))
        return w, out, target, inp

    def test_constant_one_d_gives_zero_g(self, rng):
        w, out, target, inp = self._setup(rng)
        for k in w.tensors:
            w.tensors[k] = np.zeros_like(w.tensors[k])
        w.tensors["d0.out.bias"] = np.array([1.0], dtype=np.float32)
        g, d = gan_losses(out, target, inp, w, np.random.default_rng(0))
        assert g == pytest.approx(0.0, abs=1e-7)
        # D(real)=1 costs 0, D(fake)=1 costs 1 -> 0.5
        assert d == pytest.approx(0.5, abs=1e-6)

    def test_constant_zero_d_gives_one_g(self, rng):
        w, out, target, inp = self._setup(rng)
        for k in w.tensors:
            w.tensors[k] = np.zeros_like(w.tensors[k])
        g, d = gan_losses(out, target, inp, w, np.random.default_rng(0))
        assert g == pytest.approx(1.0, abs=1e-7)
        assert d == pytest.approx(0.5, abs=1e-6)

    def test_seed_determinism(self, rng):
        w, out, target, inp = self._setup(rng)
        r1 = gan_losses(out, target, inp, w, np.random.default_rng(5))
        r2 = gan_losses(out, target, inp, w, np.random.default_rng(5))
        assert r1 == r2

    def test_crop_order_contract(self, rng):
        from texsyn.losses import draw_crop_anchors

        shape = (1, 3, 64, 64)
        a1 = draw_crop_anchors(shape, 32, 32, np.random.default_rng(3))
        a2 = draw_crop_anchors(shape, 32, 32, np.random.default_rng(3))
        assert a1 == a2
        assert len(a1[0]) == 10 and len(a1[1]) == 10

    def test_shape_contract(self, rng):
        w, out, target, inp = self._setup(rng)
        bad_inp = Tensor(rng.random((1, 3, 30, 30)).astype(np.float32))
        with pytest.raises(ShapeError):
            gan_losses(out, target, bad_inp, w, np.random.default_rng(0))
