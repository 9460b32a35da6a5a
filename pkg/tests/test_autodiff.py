"""Tape mechanics and finite-difference verification of every backward rule."""

import numpy as np
import pytest

from texsyn import autodiff as ad
from texsyn.autodiff import GradCheckReport, StaleTapeError, Tape, grad_check
from texsyn.tensor import RunningStats, ShapeError


class TestTapeMechanics:
    def test_identity_backward(self, rng):
        tape = Tape()
        x = tape.leaf(rng.standard_normal((2, 3)))
        seed = rng.standard_normal((2, 3))
        tape.backward(ad.add(x, np.zeros((2, 3))), seed)
        assert np.allclose(x.grad, seed)

    def test_fan_in_accumulation(self):
        tape = Tape()
        a = tape.leaf(np.ones((2, 2)))
        y = ad.add(a, a)
        tape.backward(y, np.ones((2, 2)))
        assert np.allclose(a.grad, 2.0)

    def test_chain_records_nodes(self, rng):
        tape = Tape()
        x = tape.leaf(rng.standard_normal((1, 2, 4, 4)))
        w = tape.leaf(rng.standard_normal((2, 2, 3, 3)))
        y = ad.relu(ad.conv2d(x, w, pads=(1, 1, 1, 1)))
        assert len(tape.nodes) == 4  # two leaves + conv + relu
        assert y.needs_grad

    def test_stale_tape_on_second_backward(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        y = ad.scale(x, 2.0)
        tape.backward(y)
        with pytest.raises(StaleTapeError):
            tape.backward(y)

    def test_stale_tape_on_record_after_backward(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        tape.backward(ad.scale(x, 2.0))
        with pytest.raises(StaleTapeError):
            ad.scale(x, 1.0)

    def test_seed_shape_checked(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 2)))
        with pytest.raises(ShapeError):
            tape.backward(ad.scale(x, 1.0), np.ones(3))

    def test_relu_gradient_is_indicator(self, rng):
        tape = Tape()
        v = rng.standard_normal((3, 3))
        x = tape.leaf(v)
        tape.backward(ad.relu(x), np.ones((3, 3)))
        assert np.allclose(x.grad, (v > 0).astype(v.dtype))

    def test_linearity_of_backward(self, rng):
        v = rng.standard_normal((2, 2, 4, 4))
        w = rng.standard_normal((2, 2, 3, 3))

        def run(n_copies):
            tape = Tape()
            x = tape.leaf(v)
            total = None
            for _ in range(n_copies):
                y = ad.sum_all(ad.conv2d(x, tape.constant(w), pads=(1, 1, 1, 1)))
                total = y if total is None else ad.add(total, y)
            tape.backward(total)
            return x.grad

        assert np.allclose(run(2), 2.0 * run(1))

    def test_constants_get_no_grad(self, rng):
        tape = Tape()
        x = tape.leaf(rng.standard_normal((2, 2)))
        c = tape.constant(rng.standard_normal((2, 2)))
        tape.backward(ad.sum_all(ad.mul(x, c)))
        assert c.grad is None
        assert x.grad is not None


class TestGradCheckHarness:
    def test_sum_of_squares(self, rng):
        def f(tape, leaves):
            return ad.sum_all(ad.square(leaves["p"]))

        p = rng.standard_normal((4, 5))
        report = grad_check(f, {"p": p}, step=1e-4, tol=1e-6)
        assert isinstance(report, GradCheckReport)
        assert report.passed, report.per_param

    def test_wrong_backward_rule_fails(self, rng):
        # negative control: a deliberately wrong VJP must be caught
        def bad_square(a):
            av = a.value
            return ad._record(a.tape, av * av, (a,),
                              lambda: lambda g: (3.0 * g * av,))

        def f(tape, leaves):
            return ad.sum_all(bad_square(leaves["p"]))

        report = grad_check(f, {"p": rng.standard_normal(6) + 2.0}, tol=1e-4)
        assert not report.passed


def _check(make_scalar, params, tol=1e-4, step=1e-3, coords=64):
    report = grad_check(make_scalar, params, step=step, tol=tol,
                        coords_per_param=coords)
    assert report.passed, f"worst: {report.worst}, all: {report.per_param}"


class TestOpGradients:
    """Central-difference checks (f64, step 1e-3, tol 1e-4) on small shapes."""

    def test_elementwise_ops(self, rng):
        p = {"a": rng.standard_normal((3, 4)) + 3.0, "b": rng.standard_normal((3, 4)) + 3.0}

        def f(tape, lv):
            s = ad.add(lv["a"], lv["b"])
            s = ad.mul(s, lv["a"])
            s = ad.div(s, ad.add_const(ad.square(lv["b"]), 1.0))
            s = ad.sub(s, ad.neg(lv["a"]))
            return ad.sum_all(ad.abs_(s))

        _check(f, p)

    def test_reductions_and_reshapes(self, rng):
        p = {"x": rng.standard_normal((2, 3, 4, 4))}

        def f(tape, lv):
            y = ad.sum_channels(ad.square(lv["x"]))
            y = ad.reshape(y, (2, 16))
            return ad.mean_all(ad.mul(y, y))

        _check(f, p)

    def test_activations(self, rng):
        p = {"x": rng.standard_normal((2, 2, 5, 5)) * 2}

        def f_relu(tape, lv):
            return ad.sum_all(ad.square(ad.relu(lv["x"])))

        def f_leaky(tape, lv):
            return ad.sum_all(ad.square(ad.leaky_relu(lv["x"], 0.2)))

        def f_minzero(tape, lv):
            return ad.sum_all(ad.square(ad.minimum_zero(lv["x"])))

        _check(f_relu, p)
        _check(f_leaky, p)
        _check(f_minzero, p)

    @pytest.mark.parametrize("stride,pads,partial", [
        (1, (0, 0, 0, 0), False),
        (1, (1, 1, 1, 1), False),
        (2, (1, 1, 1, 1), False),
        (1, (1, 1, 1, 1), True),
        (2, (1, 0, 2, 1), True),
    ])
    def test_conv2d(self, rng, stride, pads, partial):
        p = {
            "x": rng.standard_normal((2, 3, 6, 6)),
            "w": rng.standard_normal((2, 3, 3, 3)),
            "b": rng.standard_normal(2),
        }

        def f(tape, lv):
            y = ad.conv2d(lv["x"], lv["w"], lv["b"], stride=stride, pads=pads,
                          partial=partial)
            return ad.sum_all(ad.square(y))

        _check(f, p)

    def test_transposed_conv2d(self, rng):
        p = {
            "x": rng.standard_normal((2, 2, 4, 4)),
            "f": rng.standard_normal((2, 3, 3, 3)),
            "b": rng.standard_normal(3),
        }

        def f(tape, lv):
            return ad.sum_all(ad.square(ad.transposed_conv2d(lv["x"], lv["f"], lv["b"])))

        _check(f, p)

    def test_per_item_primitives(self, rng):
        p = {
            "s": rng.standard_normal((2, 1, 5, 5)),
            "F": rng.standard_normal((2, 3, 4, 4)),
        }

        def f_expand(tape, lv):
            return ad.sum_all(ad.square(ad.expand_items(lv["s"], lv["F"])))

        _check(f_expand, p)

        p2 = {
            "x": rng.standard_normal((2, 3, 8, 8)),
            "f": rng.standard_normal((2, 3, 4, 4)),
        }

        def f_corr(tape, lv):
            return ad.sum_all(ad.square(ad.corr_map_items(lv["x"], lv["f"])))

        _check(f_corr, p2)

        p3 = {
            "x": rng.standard_normal((2, 3, 8, 8)),
            "k": rng.standard_normal((2, 1, 4, 4)),
        }

        def f_chan(tape, lv):
            return ad.sum_all(ad.square(ad.corr_chan_items(lv["x"], lv["k"])))

        _check(f_chan, p3)

    def test_bilinear_and_pool(self, rng):
        p = {"x": rng.standard_normal((2, 2, 4, 5))}

        def f_up(tape, lv):
            return ad.sum_all(ad.square(ad.bilinear_upsample(lv["x"], 7, 9)))

        def f_pool(tape, lv):
            return ad.sum_all(ad.square(ad.avg_pool_global(lv["x"])))

        _check(f_up, p)
        _check(f_pool, p)

    def test_linear_and_channel_bias(self, rng):
        p = {
            "x": rng.standard_normal((3, 4)),
            "w": rng.standard_normal((2, 4)),
            "b": rng.standard_normal(2),
            "img": rng.standard_normal((3, 2, 3, 3)),
        }

        def f(tape, lv):
            v = ad.linear(lv["x"], lv["w"], lv["b"])
            y = ad.add_channel_bias(lv["img"], v)
            return ad.sum_all(ad.square(y))

        _check(f, p)

    def test_batch_norm_train(self, rng):
        p = {
            "x": rng.standard_normal((3, 2, 4, 4)),
            "g": rng.standard_normal(2) + 2.0,
            "b": rng.standard_normal(2),
        }

        def f(tape, lv):
            y = ad.batch_norm(lv["x"], lv["g"], lv["b"], RunningStats.fresh(2, np.float64),
                              train=True)
            return ad.sum_all(ad.square(y))

        _check(f, p)

    def test_batch_norm_eval(self, rng):
        stats = RunningStats(rng.standard_normal(2), rng.standard_normal(2) ** 2 + 0.5)
        p = {
            "x": rng.standard_normal((2, 2, 4, 4)),
            "g": rng.standard_normal(2) + 2.0,
            "b": rng.standard_normal(2),
        }

        def f(tape, lv):
            y = ad.batch_norm(lv["x"], lv["g"], lv["b"],
                              RunningStats(stats.mean.copy(), stats.var.copy()),
                              train=False)
            return ad.sum_all(ad.square(y))

        _check(f, p)

    def test_crops_pad_concat(self, rng):
        p = {
            "a": rng.standard_normal((2, 2, 6, 6)),
            "b": rng.standard_normal((2, 3, 6, 6)),
        }

        def f(tape, lv):
            y = ad.concat_channels(lv["a"], lv["b"])
            y = ad.pad_zero(y, 1, 2, 0, 1)
            y = ad.crop_at(y, 1, 1, 5, 5)
            y = ad.center_crop(y, 4, 4)
            return ad.sum_all(ad.square(y))

        _check(f, p)

    def test_gram(self, rng):
        p = {"psi": rng.standard_normal((2, 3, 4, 4))}

        def f(tape, lv):
            return ad.sum_all(ad.square(ad.gram(lv["psi"])))

        _check(f, p)
