"""Tensor op tests against independent oracles (naive loops, index formulas,
central finite differences)."""

import numpy as np
import pytest

from csrn.tensor import (
    ConvSpec,
    DimensionError,
    GeometryError,
    Tape,
    Tensor,
    add,
    concat_channels,
    conv2d,
    grad_check,
    mse,
    pixel_shuffle,
    pixel_unshuffle,
    relu,
    scale,
)


# ---------------------------------------------------------------- oracles

def conv2d_loops(x, w, b, stride, pad):
    """Six-nested-loop cross-correlation, written before the fast kernel."""
    n, c, h, wd = x.shape
    oc, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for ni in range(n):
        for oi in range(oc):
            for yi in range(oh):
                for xi in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += (
                                    xp[ni, ci, yi * stride + ki, xi * stride + kj]
                                    * w[oi, ci, ki, kj]
                                )
                    out[ni, oi, yi, xi] = acc + (b[0, oi, 0, 0] if b is not None else 0.0)
    return out


def pixel_shuffle_oracle(x, u):
    """output(c, y, x) = input(c*u^2 + u*(y mod u) + (x mod u), y//u, x//u)."""
    n, c, h, w = x.shape
    co = c // (u * u)
    out = np.zeros((n, co, h * u, w * u), dtype=x.dtype)
    for ci in range(co):
        for y in range(h * u):
            for xx in range(w * u):
                src = ci * u * u + u * (y % u) + (xx % u)
                out[:, ci, y, xx] = x[:, src, y // u, xx // u]
    return out


def mse_loops(a, b):
    total = 0.0
    for v1, v2 in zip(a.ravel(), b.ravel()):
        total += (v1 - v2) ** 2
    return total / a.size


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- conv2d

class TestConv2d:
    def test_all_ones_2x2(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 2, 2)))
        out = conv2d(x, w, None, ConvSpec(1, 2, 1, bias_enabled=False))
        assert out.shape == (1, 1, 2, 2)
        assert np.all(out.data == 4.0)

    def test_sampling_geometry(self, rng):
        # one 0.1-ratio sampling layer on a 96x96 image
        x = Tensor(rng.standard_normal((1, 1, 96, 96)))
        w = Tensor(rng.standard_normal((102, 1, 32, 32)))
        out = conv2d(x, w, None, ConvSpec(102, 32, 32, bias_enabled=False))
        assert out.shape == (1, 102, 3, 3)

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal((1, 3, 1, 1))
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), ConvSpec(3, 3, 1, padding=1))
        assert np.max(np.abs(out.data - conv2d_loops(x, w, b, 1, 1))) < 1e-12

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 0), (1, 1), (2, 2)])
    def test_loop_oracle_geometries(self, rng, stride, pad):
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((2, 3, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), None,
                     ConvSpec(2, 3, stride, padding=pad, bias_enabled=False))
        assert np.max(np.abs(out.data - conv2d_loops(x, w, None, stride, pad))) < 1e-12

    def test_channel_mismatch(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        w = Tensor(rng.standard_normal((1, 3, 2, 2)))
        with pytest.raises(DimensionError, match="channels"):
            conv2d(x, w, None, ConvSpec(1, 2, 1, bias_enabled=False))

    def test_bad_stride_geometry(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 5, 5)))
        w = Tensor(rng.standard_normal((1, 1, 2, 2)))
        with pytest.raises(GeometryError):
            conv2d(x, w, None, ConvSpec(1, 2, 2, bias_enabled=False))

    def test_deterministic(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
        w = Tensor(rng.standard_normal((4, 4, 3, 3)).astype(np.float32))
        spec = ConvSpec(4, 3, 1, padding=1, bias_enabled=False)
        a = conv2d(x, w, None, spec).data
        b = conv2d(x, w, None, spec).data
        assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- pixel shuffle

class TestPixelShuffle:
    def test_shape_256_to_16(self, rng):
        out = pixel_shuffle(Tensor(rng.standard_normal((1, 256, 3, 3))), 4)
        assert out.shape == (1, 16, 12, 12)

    def test_identity_factor(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        assert np.array_equal(pixel_shuffle(Tensor(x), 1).data, x)

    def test_2x2_layout(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
        out = pixel_shuffle(x, 2).data
        assert np.array_equal(out[0, 0], [[1.0, 2.0], [3.0, 4.0]])

    def test_matches_index_oracle(self, rng):
        x = rng.standard_normal((2, 18, 3, 4))
        out = pixel_shuffle(Tensor(x), 3).data
        assert np.array_equal(out, pixel_shuffle_oracle(x, 3))

    def test_round_trip_bit_exact(self, rng):
        x = rng.standard_normal((1, 32, 5, 5)).astype(np.float32)
        back = pixel_unshuffle(pixel_shuffle(Tensor(x), 4), 4).data
        assert back.tobytes() == x.tobytes()

    def test_preserves_value_multiset_and_sum(self, rng):
        x = rng.standard_normal((1, 8, 3, 3))
        out = pixel_shuffle(Tensor(x), 2).data
        assert np.array_equal(np.sort(out.ravel()), np.sort(x.ravel()))
        assert out.sum() == pytest.approx(x.sum(), abs=1e-12)

    def test_divisibility_error(self, rng):
        with pytest.raises(DimensionError, match="divisible"):
            pixel_shuffle(Tensor(rng.standard_normal((1, 6, 2, 2))), 2)


# ---------------------------------------------------------------- pointwise ops

class TestPointwise:
    def test_relu_values(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3))
        assert np.array_equal(relu(x).data.ravel(), [0.0, 0.0, 2.0])

    def test_relu_identity_on_nonnegative(self, rng):
        x = np.abs(rng.standard_normal((1, 2, 3, 3)))
        assert np.array_equal(relu(Tensor(x)).data, x)

    def test_relu_gradient(self):
        x = Tensor(np.array([-1.0, 2.0]).reshape(1, 1, 1, 2))
        tape = Tape()
        xt = tape.watch(x)
        # loss = mean(relu(x)^2); at [-1, 2] the gradient is [0, 2*2/2]
        loss = mse(relu(xt), Tensor(np.zeros((1, 1, 1, 2))))
        g = tape.backward(loss)[xt.node_id].data.ravel()
        assert np.allclose(g, [0.0, 2.0])

    def test_concat_shapes_and_slices(self, rng):
        a = rng.standard_normal((1, 8, 6, 6))
        b = rng.standard_normal((1, 8, 6, 6))
        out = concat_channels([Tensor(a), Tensor(b)]).data
        assert out.shape == (1, 16, 6, 6)
        assert np.array_equal(out[:, :8], a)
        assert np.array_equal(out[:, 8:], b)

    def test_concat_single_input_identity(self, rng):
        a = rng.standard_normal((1, 3, 2, 2))
        assert np.array_equal(concat_channels([Tensor(a)]).data, a)

    def test_concat_three_way(self, rng):
        parts = [rng.standard_normal((1, 32, 48, 48)) for _ in range(3)]
        out = concat_channels([Tensor(p) for p in parts]).data
        assert out.shape == (1, 96, 48, 48)
        for i, p in enumerate(parts):
            assert np.array_equal(out[:, 32 * i : 32 * (i + 1)], p)
        assert out.sum() == pytest.approx(sum(p.sum() for p in parts), rel=1e-12)

    def test_concat_spatial_mismatch(self, rng):
        with pytest.raises(DimensionError):
            concat_channels([Tensor(rng.standard_normal((1, 2, 3, 3))),
                             Tensor(rng.standard_normal((1, 2, 4, 3)))])

    def test_add_zero_and_inverse(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        r = rng.standard_normal((1, 2, 3, 3))
        assert np.array_equal(add(Tensor(x), Tensor(np.zeros_like(x))).data, x)
        total = add(Tensor(x), Tensor(r)).data
        assert np.allclose(total - r, x)

    def test_add_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            add(Tensor(rng.standard_normal((1, 1, 2, 2))),
                Tensor(rng.standard_normal((1, 1, 2, 3))))


# ---------------------------------------------------------------- mse

class TestMse:
    def test_zero_on_equal(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        assert mse(x, x).item() == 0.0

    def test_simple_value(self):
        a = Tensor(np.array([0.0, 0.0]).reshape(1, 1, 1, 2))
        b = Tensor(np.array([2.0, 0.0]).reshape(1, 1, 1, 2))
        assert mse(a, b).item() == pytest.approx(2.0)

    def test_matches_loop_oracle(self, rng):
        a = rng.standard_normal((2, 3, 4, 4))
        b = rng.standard_normal((2, 3, 4, 4))
        assert mse(Tensor(a), Tensor(b)).item() == pytest.approx(mse_loops(a, b), abs=1e-12)


# ---------------------------------------------------------------- backward

class TestBackward:
    def test_scalar_quadratic(self):
        # loss = mse(w, 0) = w^2 for scalar w=3 -> dL/dw = 6
        tape = Tape()
        w = tape.watch(Tensor.scalar(3.0))
        loss = mse(w, Tensor.scalar(0.0))
        assert tape.backward(loss)[w.node_id].item() == pytest.approx(6.0)

    def test_loss_must_be_scalar(self, rng):
        tape = Tape()
        x = tape.watch(Tensor(rng.standard_normal((1, 1, 2, 2))))
        y = relu(x)
        with pytest.raises(DimensionError, match="scalar"):
            tape.backward(y)

    def test_unreachable_leaf_gets_zeros(self, rng):
        tape = Tape()
        x = tape.watch(Tensor(rng.standard_normal((1, 1, 2, 2))))
        unused = tape.watch(Tensor(rng.standard_normal((1, 1, 3, 3))))
        loss = mse(x, Tensor(np.zeros((1, 1, 2, 2))))
        grads = tape.backward(loss)
        assert np.array_equal(grads[unused.node_id].data, np.zeros((1, 1, 3, 3)))

    def test_shared_input_accumulates(self):
        # loss = mse(x + x, 0) = 4x^2 -> dL/dx = 8x
        tape = Tape()
        x = tape.watch(Tensor.scalar(1.5))
        loss = mse(add(x, x), Tensor.scalar(0.0))
        assert tape.backward(loss)[x.node_id].item() == pytest.approx(12.0)

    def test_scale_gradient(self):
        tape = Tape()
        x = tape.watch(Tensor.scalar(2.0))
        loss = mse(scale(x, 3.0), Tensor.scalar(0.0))  # (3x)^2 -> 18x
        assert tape.backward(loss)[x.node_id].item() == pytest.approx(36.0)

    def test_repeated_backward_is_bit_identical(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((2, 2, 3, 3))

        def run():
            tape = Tape()
            xt, wt = tape.watch(Tensor(x)), tape.watch(Tensor(w))
            out = conv2d(xt, wt, None, ConvSpec(2, 3, 1, padding=1, bias_enabled=False))
            grads = tape.backward(mse(out, Tensor(np.zeros_like(out.data))))
            return grads[wt.node_id].data

        assert run().tobytes() == run().tobytes()


# ---------------------------------------------------------------- grad_check

class TestGradCheck:
    def test_conv2d_passes(self, rng):
        spec = ConvSpec(3, 3, 1, padding=1)
        report = grad_check(
            lambda x, w, b: conv2d(x, w, b, spec),
            [Tensor(rng.standard_normal((1, 2, 4, 4))),
             Tensor(rng.standard_normal((3, 2, 3, 3))),
             Tensor(rng.standard_normal((1, 3, 1, 1)))],
        )
        assert report.passed

    def test_pixel_shuffle_passes(self, rng):
        report = grad_check(lambda x: pixel_shuffle(x, 2),
                            [Tensor(rng.standard_normal((1, 8, 3, 3)))])
        assert report.passed

    def test_corrupted_gradient_fails(self, rng):
        report = grad_check(lambda x: relu(x),
                            [Tensor(rng.standard_normal((1, 2, 4, 4)))],
                            tape_grad_scale=2.0)
        assert not report.passed


# ---------------------------------------------------------------- tensor type

class TestTensorType:
    def test_rejects_other_ranks(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 3)))

    def test_forward_ops_stay_finite(self, rng):
        x = Tensor(rng.uniform(-1, 1, (1, 4, 6, 6)))
        w = Tensor(rng.uniform(-1, 1, (4, 4, 3, 3)))
        out = relu(conv2d(x, w, None, ConvSpec(4, 3, 1, padding=1, bias_enabled=False)))
        assert np.isfinite(out.data).all()

    def test_mixed_tapes_rejected(self, rng):
        t1, t2 = Tape(), Tape()
        a = t1.watch(Tensor(rng.standard_normal((1, 1, 2, 2))))
        b = t2.watch(Tensor(rng.standard_normal((1, 1, 2, 2))))
        with pytest.raises(ValueError, match="different tapes"):
            add(a, b)
