"""Two-stream extractor and patch (un)embedding contracts."""

import numpy as np
import pytest

from emucount import autodiff as ad
from emucount.autodiff import Tensor
from emucount.backbone import (PatchEmbed, Stream, StreamConfig, Unpatch,
                               replicate_channels, to_patches)
from emucount.errors import ContractError, ShapeError


def rand(shape, seed):
    return np.random.default_rng(seed).uniform(-1, 1, shape)


class TestStream:
    def test_output_shape(self):
        stream = Stream(StreamConfig(), np.random.default_rng(0))
        out = stream.extract(Tensor(rand((3, 32, 32), 1)))
        assert out.shape == (32, 4, 4)

    def test_zero_input_zero_biases_gives_zero(self):
        stream = Stream(StreamConfig(), np.random.default_rng(0))
        out = stream.extract(Tensor(np.zeros((3, 32, 32))))
        np.testing.assert_array_equal(out.data, np.zeros((32, 4, 4)))

    def test_matches_primitive_composition(self):
        cfg = StreamConfig()
        stream = Stream(cfg, np.random.default_rng(2))
        x = Tensor(rand((3, 16, 16), 3))
        out = stream.extract(x)
        # compose the same conv/relu/pool primitives by hand
        y = x
        i = 0
        for _ in cfg.channels:
            for _ in range(cfg.convs_per_block):
                conv = stream.convs[i]
                y = ad.relu(ad.conv2d(y, conv.w, padding=1, bias=conv.b))
                i += 1
            y = ad.maxpool2d(y, 2)
        np.testing.assert_array_equal(out.data, y.data)

    def test_streams_are_independent(self):
        rng = np.random.default_rng(4)
        r_stream = Stream(StreamConfig(), rng)
        t_stream = Stream(StreamConfig(), rng)
        x = Tensor(rand((3, 16, 16), 5))
        before = t_stream.extract(x).data.copy()
        r_stream.convs[0].w.data += 1.0
        np.testing.assert_array_equal(t_stream.extract(x).data, before)

    def test_indivisible_extent_rejected(self):
        stream = Stream(StreamConfig(), np.random.default_rng(0))
        with pytest.raises(ShapeError):
            stream.extract(Tensor(np.zeros((3, 20, 16))))

    def test_bad_block_count(self):
        with pytest.raises(ContractError):
            StreamConfig(channels=(8, 16))

    def test_replicate_channels(self):
        x = rand((1, 4, 4), 6)
        out = replicate_channels(Tensor(x), 3)
        assert out.shape == (3, 4, 4)
        for c in range(3):
            np.testing.assert_array_equal(out.data[c], x[0])


class TestPatchEmbed:
    def test_shape(self):
        pe = PatchEmbed(32, 2, 64, np.random.default_rng(0))
        out = pe(Tensor(rand((32, 4, 4), 1)))
        assert out.shape == (4, 64)
        assert pe.grid(4, 4) == (2, 2)

    def test_ps1_tokens_are_column_projections(self):
        pe = PatchEmbed(8, 1, 16, np.random.default_rng(2))
        f = rand((8, 3, 3), 3)
        out = pe(Tensor(f))
        assert out.shape == (9, 16)
        # token k projects the spatial column at (k//3, k%3)
        cols = f.reshape(8, 9).T
        np.testing.assert_allclose(out.data, cols @ pe.proj.w.data + pe.proj.b.data,
                                   atol=1e-12)

    def test_identity_projection_reproduces_patches(self):
        c, ps = 16, 2
        d = c * ps * ps
        pe = PatchEmbed(c, ps, d, np.random.default_rng(4))
        pe.proj.w.data = np.eye(d)
        pe.proj.b.data[:] = 0.0
        f = rand((c, 4, 4), 5)
        out = pe(Tensor(f))
        np.testing.assert_array_equal(out.data, to_patches(Tensor(f), ps).data)
        # first token is the top-left patch, flattened channel-major
        np.testing.assert_array_equal(out.data[0], f[:, :2, :2].reshape(-1))

    def test_linearity_with_zero_bias(self):
        pe = PatchEmbed(4, 2, 8, np.random.default_rng(6))
        pe.proj.b.data[:] = 0.0
        f = rand((4, 4, 4), 7)
        a = pe(Tensor(2.5 * f)).data
        b = 2.5 * pe(Tensor(f)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_indivisible_patch(self):
        pe = PatchEmbed(4, 2, 8, np.random.default_rng(8))
        with pytest.raises(ShapeError):
            pe(Tensor(np.zeros((4, 5, 4))))


class TestUnpatch:
    def test_round_trip_with_identity_projections(self):
        c = 12
        pe = PatchEmbed(c, 1, c, np.random.default_rng(0))
        up = Unpatch(c, c, np.random.default_rng(1))
        pe.proj.w.data = np.eye(c)
        pe.proj.b.data[:] = 0.0
        up.proj.w.data = np.eye(c)
        up.proj.b.data[:] = 0.0
        f = rand((c, 3, 5), 2)
        back = up(pe(Tensor(f)), 3, 5)
        np.testing.assert_array_equal(back.data, f)

    def test_row_major_token_order(self):
        up = Unpatch(1, 1, np.random.default_rng(3))
        up.proj.w.data = np.eye(1)
        up.proj.b.data[:] = 0.0
        tokens = Tensor(np.array([[1.0], [2.0], [3.0], [4.0]]))
        out = up(tokens, 2, 2)
        np.testing.assert_array_equal(out.data, [[[1.0, 2.0], [3.0, 4.0]]])

    def test_matches_index_arithmetic_oracle(self):
        rng = np.random.default_rng(4)
        up = Unpatch(6, 5, rng)
        x = rand((8, 6), 5)
        out = up(Tensor(x), 2, 4)
        proj = x @ up.proj.w.data + up.proj.b.data
        expected = np.zeros((5, 2, 4))
        for n in range(8):
            expected[:, n // 4, n % 4] = proj[n]
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_token_count_mismatch(self):
        up = Unpatch(6, 5, np.random.default_rng(6))
        with pytest.raises(ShapeError):
            up(Tensor(np.zeros((7, 6))), 2, 4)
