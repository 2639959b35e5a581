"""Forward contracts and gradient checks for every autodiff primitive."""

import numpy as np
import pytest

from conftest import gradcheck, leaf
from slicepaint import tensor as T
from slicepaint.nn import SelfAttention2d, time_embedding
from slicepaint.tensor import (
    ConfigError,
    Parameter,
    ShapeError,
    StateError,
    Tape,
    Tensor,
    backward,
)


def conv_oracle(x, w, b, stride=1, padding=0):
    """Direct nested-loop cross-correlation, float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for ni in range(n):
        for ki in range(k):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[ni, ki, i, j] = (patch * w[ki]).sum() + b[ki]
    return out


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 1, 4, 4)).astype(np.float32))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = T.conv2d(x, w, b)
        np.testing.assert_array_equal(out.data, x.data)

    def test_ones_kernel_counts_taps(self):
        x = Tensor(np.ones((1, 1, 5, 5), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = T.conv2d(x, w, b, padding=1).data[0, 0]
        assert out[2, 2] == 9.0
        assert out[0, 0] == 4.0
        assert out[0, 2] == 6.0

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((1, 1, 5, 5)).astype(np.float32)
        w = rng.standard_normal((1, 1, 3, 3)).astype(np.float32)
        b = rng.standard_normal(1).astype(np.float32)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        want = conv_oracle(x, w, b, padding=1)
        np.testing.assert_allclose(got, want, atol=1e-5)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
    def test_matches_oracle_multichannel(self, rng, stride, padding):
        x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
        want = conv_oracle(x, w, b, stride=stride, padding=padding)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)

    def test_channel_mismatch_raises(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32))
        w = Tensor(rng.standard_normal((1, 3, 3, 3)).astype(np.float32))
        with pytest.raises(ShapeError):
            T.conv2d(x, w, Tensor(np.zeros(1, dtype=np.float32)), padding=1)

    def test_linearity(self, rng):
        w = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32))
        b = Tensor(np.zeros(3, dtype=np.float32))
        x = Tensor(rng.standard_normal((1, 2, 8, 8)).astype(np.float32))
        y = Tensor(rng.standard_normal((1, 2, 8, 8)).astype(np.float32))
        a_c, b_c = 0.7, -1.3
        combo = Tensor(a_c * x.data + b_c * y.data)
        lhs = T.conv2d(combo, w, b, padding=1).data
        rhs = a_c * T.conv2d(x, w, b, padding=1).data + b_c * T.conv2d(y, w, b, padding=1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    @pytest.mark.parametrize("kernel,stride,padding", [(3, 1, 1), (3, 2, 1), (1, 1, 0)])
    def test_gradcheck(self, rng, kernel, stride, padding):
        x = leaf(rng, (2, 3, 6, 6))
        w = leaf(rng, (4, 3, kernel, kernel))
        b = leaf(rng, (4,))
        proj = Tensor(rng.standard_normal((2, 4, (6 + 2 * padding - kernel) // stride + 1,
                                           (6 + 2 * padding - kernel) // stride + 1)))

        def loss():
            return T.sum_(T.mul(T.conv2d(x, w, b, stride=stride, padding=padding), proj))

        assert gradcheck(loss, [x, w, b]) < 1e-5


class TestGroupNorm:
    def test_constant_input_normalizes_to_zero(self):
        x = Tensor(np.full((2, 4, 3, 3), 7.0, dtype=np.float32))
        out = T.group_norm(x, 2, Tensor(np.ones(4, dtype=np.float32)),
                           Tensor(np.zeros(4, dtype=np.float32)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-4)

    def test_zero_gain_yields_offset(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 3, 3)).astype(np.float32))
        offset = np.arange(4, dtype=np.float32)
        out = T.group_norm(x, 2, Tensor(np.zeros(4, dtype=np.float32)), Tensor(offset))
        np.testing.assert_array_equal(out.data, np.broadcast_to(offset[None, :, None, None], out.data.shape))

    def test_group_statistics(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 4, 4)).astype(np.float32) * 3 + 1)
        out = T.group_norm(x, 2, Tensor(np.ones(4, dtype=np.float32)),
                           Tensor(np.zeros(4, dtype=np.float32)))
        grouped = out.data.reshape(2, 2, -1).astype(np.float64)
        assert np.abs(grouped.mean(axis=2)).max() <= 1e-4
        assert np.abs(grouped.var(axis=2) - 1.0).max() <= 1e-3

    def test_bad_groups_raises(self, rng):
        x = Tensor(rng.standard_normal((1, 6, 2, 2)).astype(np.float32))
        with pytest.raises(ConfigError):
            T.group_norm(x, 4, Tensor(np.ones(6, dtype=np.float32)),
                         Tensor(np.zeros(6, dtype=np.float32)))

    def test_gradcheck(self, rng):
        x = leaf(rng, (2, 4, 3, 3))
        gain = leaf(rng, (4,))
        offset = leaf(rng, (4,))
        proj = Tensor(rng.standard_normal((2, 4, 3, 3)))

        def loss():
            return T.sum_(T.mul(T.group_norm(x, 2, gain, offset), proj))

        assert gradcheck(loss, [x, gain, offset]) < 1e-5


class TestSilu:
    def test_values(self):
        x = Tensor(np.array([0.0, 1.0, 30.0, -30.0], dtype=np.float32))
        out = T.silu(x).data
        assert out[0] == 0.0
        np.testing.assert_allclose(out[1], 1.0 / (1.0 + np.exp(-1.0)), rtol=1e-6)
        np.testing.assert_allclose(out[2], 30.0, rtol=1e-5)
        np.testing.assert_allclose(out[3], 0.0, atol=1e-6)

    def test_gradcheck(self, rng):
        x = leaf(rng, (5, 4))
        proj = Tensor(rng.standard_normal((5, 4)))

        def loss():
            return T.sum_(T.mul(T.silu(x), proj))

        assert gradcheck(loss, [x]) < 1e-6


class TestAttention:
    def test_single_token_reduces_to_residual_projection(self, rng):
        att = SelfAttention2d(4, 1, rng)
        x = Tensor(rng.standard_normal((1, 4, 1, 1)).astype(np.float32))
        got = att(x).data
        # softmax over a single key is 1: output = x + proj(value(norm(x)))
        normed = T.group_norm(x, att.norm.groups, att.norm.gain, att.norm.offset).data
        qkv_w = att.qkv.weight.data[:, :, 0, 0]
        v = qkv_w[8:12] @ normed[0, :, 0, 0] + att.qkv.bias.data[8:12]
        proj = att.proj.weight.data[:, :, 0, 0] @ v + att.proj.bias.data
        want = x.data[0, :, 0, 0] + proj
        np.testing.assert_allclose(got[0, :, 0, 0], want, rtol=1e-5, atol=1e-6)

    def test_permutation_equivariance(self, rng):
        att = SelfAttention2d(8, 2, rng)
        x = rng.standard_normal((1, 8, 2, 2)).astype(np.float32)
        perm = np.array([3, 1, 0, 2])
        xp = x.reshape(1, 8, 4)[:, :, perm].reshape(1, 8, 2, 2)
        out = att(Tensor(x)).data.reshape(1, 8, 4)
        outp = att(Tensor(xp)).data.reshape(1, 8, 4)
        np.testing.assert_allclose(out[:, :, perm], outp, rtol=1e-4, atol=1e-5)

    def test_matches_loop_oracle(self, rng):
        att = SelfAttention2d(8, 1, rng)
        x = rng.standard_normal((1, 8, 4, 4)).astype(np.float32)
        got = att(Tensor(x)).data

        normed = T.group_norm(Tensor(x), att.norm.groups, att.norm.gain, att.norm.offset).data
        qkv_w = att.qkv.weight.data[:, :, 0, 0].astype(np.float64)
        qkv_b = att.qkv.bias.data.astype(np.float64)
        tokens = normed.reshape(8, 16).T.astype(np.float64)  # [16, C]
        q = tokens @ qkv_w[:8].T + qkv_b[:8]
        k = tokens @ qkv_w[8:16].T + qkv_b[8:16]
        v = tokens @ qkv_w[16:].T + qkv_b[16:]
        mixed = np.zeros_like(v)
        for i in range(16):
            logits = np.array([q[i] @ k[j] / np.sqrt(8.0) for j in range(16)])
            weights = np.exp(logits - logits.max())
            weights /= weights.sum()
            for j in range(16):
                mixed[i] += weights[j] * v[j]
        proj_w = att.proj.weight.data[:, :, 0, 0].astype(np.float64)
        out_tokens = mixed @ proj_w.T + att.proj.bias.data
        want = x + out_tokens.T.reshape(1, 8, 4, 4)
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-4)

    def test_bad_heads_raises(self, rng):
        with pytest.raises(ConfigError):
            SelfAttention2d(6, 4, rng)

    def test_gradcheck(self, rng):
        att = SelfAttention2d(4, 2, rng)
        for p in att.parameters():
            p.set_data(p.data.astype(np.float64))
        x = leaf(rng, (1, 4, 2, 2))
        proj = Tensor(rng.standard_normal((1, 4, 2, 2)))

        def loss():
            return T.sum_(T.mul(att(x), proj))

        assert gradcheck(loss, [x] + att.parameters()) < 1e-5


class TestTimeEmbedding:
    def test_t_zero(self):
        emb = time_embedding(0, 8)
        np.testing.assert_array_equal(emb[:4], 0.0)
        np.testing.assert_array_equal(emb[4:], 1.0)

    def test_no_collisions_up_to_1000(self):
        embs = np.stack([time_embedding(t, 128) for t in range(1001)])
        assert np.unique(embs, axis=0).shape[0] == 1001

    def test_range(self):
        for t in (0, 1, 500, 1000):
            emb = time_embedding(t, 64)
            assert np.all(emb >= -1.0) and np.all(emb <= 1.0)

    def test_odd_dim_raises(self):
        with pytest.raises(ConfigError):
            time_embedding(3, 7)


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        w = Parameter(rng.standard_normal((3, 4)).astype(np.float32), name="w")
        with Tape() as tape:
            loss = T.sum_(w)
        backward(loss, tape)
        np.testing.assert_array_equal(w.grad, np.ones_like(w.data))

    def test_square_gradient_is_2w(self, rng):
        w = Parameter(rng.standard_normal((5,)).astype(np.float32), name="w")
        with Tape() as tape:
            loss = T.sum_(T.mul(w, w))
        backward(loss, tape)
        np.testing.assert_allclose(w.grad, 2 * w.data, rtol=1e-6)

    def test_double_backward_raises(self, rng):
        w = Parameter(rng.standard_normal((3,)).astype(np.float32), name="w")
        with Tape() as tape:
            loss = T.sum_(w)
        backward(loss, tape)
        with pytest.raises(StateError):
            backward(loss, tape)

    def test_unused_parameter_keeps_zero_gradient(self, rng):
        w = Parameter(rng.standard_normal((3,)).astype(np.float32), name="w")
        x = Tensor(rng.standard_normal((3,)).astype(np.float32))
        with Tape() as tape:
            loss = T.sum_(x)
        backward(loss, tape)
        np.testing.assert_array_equal(w.grad, np.zeros_like(w.data))

    def test_non_scalar_loss_rejected(self, rng):
        w = Parameter(rng.standard_normal((3,)).astype(np.float32), name="w")
        with Tape() as tape:
            out = T.mul(w, w)
        with pytest.raises(ShapeError):
            backward(out, tape)


class TestOtherPrimitives:
    def test_add_mul_broadcast_gradcheck(self, rng):
        a = leaf(rng, (2, 3, 4))
        b = leaf(rng, (3, 1))
        proj = Tensor(rng.standard_normal((2, 3, 4)))

        def loss():
            return T.sum_(T.mul(T.add(a, b), proj))

        assert gradcheck(loss, [a, b]) < 1e-6

    def test_sub_gradcheck(self, rng):
        a = leaf(rng, (4, 3))
        b = leaf(rng, (4, 3))

        def loss():
            d = T.sub(a, b)
            return T.sum_(T.mul(d, d))

        assert gradcheck(loss, [a, b]) < 1e-6

    def test_linear_gradcheck(self, rng):
        x = leaf(rng, (3, 5))
        w = leaf(rng, (2, 5))
        b = leaf(rng, (2,))
        proj = Tensor(rng.standard_normal((3, 2)))

        def loss():
            return T.sum_(T.mul(T.linear(x, w, b), proj))

        assert gradcheck(loss, [x, w, b]) < 1e-6

    def test_matmul_batched_gradcheck(self, rng):
        a = leaf(rng, (2, 3, 4))
        b = leaf(rng, (2, 4, 5))
        proj = Tensor(rng.standard_normal((2, 3, 5)))

        def loss():
            return T.sum_(T.mul(T.matmul(a, b), proj))

        assert gradcheck(loss, [a, b]) < 1e-6

    def test_softmax_rows_sum_to_one(self, rng):
        x = Tensor(rng.standard_normal((3, 7)).astype(np.float32))
        s = T.softmax(x).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=1e-6)
        assert np.all(s > 0)

    def test_softmax_gradcheck(self, rng):
        x = leaf(rng, (3, 5))
        proj = Tensor(rng.standard_normal((3, 5)))

        def loss():
            return T.sum_(T.mul(T.softmax(x), proj))

        assert gradcheck(loss, [x]) < 1e-6

    def test_mean_axis_gradcheck(self, rng):
        x = leaf(rng, (3, 4, 5))
        proj = Tensor(rng.standard_normal((3, 5)))

        def loss():
            return T.sum_(T.mul(T.mean(x, axis=1), proj))

        assert gradcheck(loss, [x]) < 1e-6

    def test_upsample_values(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
        up = T.upsample2x(x).data[0, 0]
        np.testing.assert_array_equal(up[:2, :2], 1.0)
        np.testing.assert_array_equal(up[2:, 2:], 4.0)

    def test_upsample_gradcheck(self, rng):
        x = leaf(rng, (1, 2, 3, 3))
        proj = Tensor(rng.standard_normal((1, 2, 6, 6)))

        def loss():
            return T.sum_(T.mul(T.upsample2x(x), proj))

        assert gradcheck(loss, [x]) < 1e-6

    def test_concat_slice_gradcheck(self, rng):
        a = leaf(rng, (2, 2, 3, 3))
        b = leaf(rng, (2, 3, 3, 3))
        proj = Tensor(rng.standard_normal((2, 3, 3, 3)))

        def loss():
            cat = T.concat([a, b], axis=1)
            return T.sum_(T.mul(T.slice_axis(cat, 1, 1, 4), proj))

        assert gradcheck(loss, [a, b]) < 1e-6

    def test_reshape_transpose_gradcheck(self, rng):
        x = leaf(rng, (2, 3, 4))
        proj = Tensor(rng.standard_normal((4, 6)))

        def loss():
            y = T.transpose(x, (2, 0, 1))
            return T.sum_(T.mul(T.reshape(y, (4, 6)), proj))

        assert gradcheck(loss, [x]) < 1e-6

    def test_scale_gradcheck(self, rng):
        x = leaf(rng, (3, 3))

        def loss():
            return T.sum_(T.mul(T.scale(x, 2.5), x))

        assert gradcheck(loss, [x]) < 1e-6


class TestDeterminism:
    def test_primitives_bit_identical(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
        w = Tensor(rng.standard_normal((4, 4, 3, 3)).astype(np.float32))
        b = Tensor(rng.standard_normal(4).astype(np.float32))
        first = T.conv2d(x, w, b, padding=1).data
        second = T.conv2d(x, w, b, padding=1).data
        assert np.array_equal(first, second)
        g = Tensor(np.ones(4, dtype=np.float32))
        o = Tensor(np.zeros(4, dtype=np.float32))
        assert np.array_equal(T.group_norm(x, 2, g, o).data, T.group_norm(x, 2, g, o).data)
        assert np.array_equal(T.silu(x).data, T.silu(x).data)
