"""Feature encoding, bilinear sampling, and view pooling into volumes."""

import numpy as np
import pytest

import voxeldiff.tensor as T
from voxeldiff.autodiff import finite_difference
from voxeldiff.bilinear import bilinear_sample, bilinear_weights, downsample_box, upsample_bilinear
from voxeldiff.errors import ValidationError
from voxeldiff.field import VoxelGrid
from voxeldiff.render import Camera
from voxeldiff.scenes import ring_cameras
from voxeldiff.tensor import Tensor
from voxeldiff.unproject import Accumulator, Encoder2D, encode_frames, unproject


class TestBilinearSample:
    def test_pixel_center_returns_pixel_value(self):
        rng = np.random.default_rng(0)
        fmap = rng.standard_normal((3, 5, 7))
        out = bilinear_sample(fmap, np.array([[2.0, 3.0]]))  # x=col 2, y=row 3
        np.testing.assert_allclose(out.data[0], fmap[:, 3, 2], atol=1e-14)

    def test_midpoint_of_adjacent_centers_is_their_mean(self):
        rng = np.random.default_rng(1)
        fmap = rng.standard_normal((2, 4, 4))
        out = bilinear_sample(fmap, np.array([[1.5, 2.0]]))
        np.testing.assert_allclose(out.data[0], (fmap[:, 2, 1] + fmap[:, 2, 2]) / 2, atol=1e-14)

    def test_random_points_match_corner_weight_oracle(self):
        rng = np.random.default_rng(2)
        fmap = rng.standard_normal((3, 6, 5))
        pts = rng.uniform(-1.0, 6.0, size=(1000, 2))
        out = bilinear_sample(fmap, pts).data
        expected = np.zeros_like(out)
        for n, (x, y) in enumerate(pts):
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            fx, fy = x - x0, y - y0
            for cx, cy, w in [
                (x0, y0, (1 - fx) * (1 - fy)),
                (x0 + 1, y0, fx * (1 - fy)),
                (x0, y0 + 1, (1 - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            ]:
                if 0 <= cx < 5 and 0 <= cy < 6:
                    expected[n] += w * fmap[:, cy, cx]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_weights_partition_unity_for_interior_points(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(0.0, 3.0, size=(200, 2))
        _idx, w = bilinear_weights(4, 4, pts)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_far_outside_points_sample_zero(self):
        fmap = np.ones((2, 4, 4))
        out = bilinear_sample(fmap, np.array([[-2.0, 1.0], [1.0, 9.0]]))
        assert np.all(out.data == 0.0)

    def test_gradient_wrt_map(self):
        rng = np.random.default_rng(4)
        fmap = rng.standard_normal((2, 4, 4))
        pts = rng.uniform(0.2, 2.8, size=(9, 2))
        proj = rng.standard_normal((9, 2))

        def loss_of(m):
            return float((bilinear_sample(m, pts).data * proj).sum())

        mt = Tensor(fmap.copy(), requires_grad=True)
        T.tensor_sum(T.mul(bilinear_sample(mt, pts), Tensor(proj))).backward()
        fd = finite_difference(loss_of, fmap.copy(), step=1e-5)
        np.testing.assert_allclose(mt.grad, fd, atol=1e-8)


class TestImageResampling:
    def test_upsample_preserves_constants(self):
        img = np.full((3, 3, 3), 0.37)
        out = upsample_bilinear(img, 2)
        np.testing.assert_allclose(out.data, 0.37, atol=1e-14)

    def test_downsample_box_averages_blocks(self):
        img = np.arange(16, dtype=float).reshape(4, 4, 1)
        out = downsample_box(img, 2)
        np.testing.assert_allclose(out[0, 0, 0], (0 + 1 + 4 + 5) / 4)

    def test_upsample_interpolates_between_centers(self):
        # 1-D ramp along x: target column j samples source at (j+0.5)/2 - 0.5
        img = np.zeros((2, 2, 1))
        img[:, 1, 0] = 1.0
        up = upsample_bilinear(img, 2).data
        np.testing.assert_allclose(up[0, :, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)

    def test_upsample_is_differentiable(self):
        img = Tensor(np.random.default_rng(6).random((2, 2, 3)), requires_grad=True)
        out = upsample_bilinear(img, 2)
        T.tensor_sum(out).backward()
        # every upsampled pixel distributes weight back; totals are conserved
        assert img.grad is not None
        np.testing.assert_allclose(img.grad.sum(), out.data.size, atol=1e-9)


class TestEncoder:
    def test_zero_image_through_zeroed_encoder_gives_zero_map(self):
        enc = Encoder2D(4, np.random.default_rng(0), widths=(3, 3))
        for p in enc.parameters().values():
            p.data = np.zeros_like(p.data)
        out = enc(np.zeros((8, 8, 3)))
        assert np.all(out.data == 0.0)

    def test_identical_images_identical_maps(self):
        enc = Encoder2D(4, np.random.default_rng(1), widths=(3, 3))
        img = np.random.default_rng(2).random((8, 8, 3))
        a, b = encode_frames(enc, [img, img.copy()])
        assert np.array_equal(a.data, b.data)

    def test_matches_hand_rolled_convolution(self):
        # single 3x3 stride-2 conv layer cross-checked against a direct loop
        enc = Encoder2D(2, np.random.default_rng(3), widths=(2, 2))
        img = np.random.default_rng(4).random((8, 8, 3))
        x = img.transpose(2, 0, 1)
        w = enc.conv1.w.data
        b = enc.conv1.b.data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 4))
        for co in range(2):
            for oy in range(4):
                for ox in range(4):
                    acc = b[co]
                    for ci in range(3):
                        for ky in range(3):
                            for kx in range(3):
                                acc += w[co, ci, ky, kx] * xp[ci, 2 * oy + ky, 2 * ox + kx]
                    ref[co, oy, ox] = acc
        from voxeldiff.conv import conv2d

        out = T.add_bias(conv2d(Tensor(x), enc.conv1.w, stride=2), enc.conv1.b, axis=0)
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        enc = Encoder2D(4, np.random.default_rng(5))
        with pytest.raises(ValidationError):
            encode_frames(enc, [np.zeros((8, 8, 3)), np.zeros((16, 16, 3))])


class _FixedAccumulator:
    """Duck-typed accumulator with externally scripted weights."""

    def __init__(self, channels, weight_values):
        self.channels = channels
        self.weights = list(weight_values)
        self.calls = 0

    def __call__(self, features, view_dirs):
        w = self.weights[self.calls]
        self.calls += 1
        n = features.data.shape[0]
        return Tensor(np.full(n, w)), features

    def parameters(self):
        return {}


class TestUnproject:
    def _setup(self, d=3, s=4, n_frames=2, seed=0):
        rng = np.random.default_rng(seed)
        cams = ring_cameras(n_frames, 2.8, 10.0, 16)
        maps = [Tensor(rng.standard_normal((d, 4, 4))) for _ in range(n_frames)]
        grid = VoxelGrid.zeros(s, d)
        return cams, maps, grid

    def test_empty_frame_set_gives_zero_volume(self):
        acc = Accumulator(3, np.random.default_rng(0))
        vol = unproject([], [], VoxelGrid.zeros(4, 3), acc)
        assert vol.data.shape == (3, 4, 4, 4)
        assert np.all(vol.data == 0.0)

    def test_single_frame_unit_weight_equals_bilinear_sample(self):
        cams, maps, grid = self._setup(n_frames=1)
        acc = _FixedAccumulator(3, [1.0])
        vol = unproject(maps[:1], cams[:1], grid, acc, stride=4)
        # oracle: project each vertex, bilinear-sample the map directly
        verts = grid.vertex_positions()
        pix, inside = cams[0].project(verts)
        coords = np.stack([(pix[:, 0] + 0.5) / 4 - 0.5, (pix[:, 1] + 0.5) / 4 - 0.5], axis=1)
        coords = np.where(inside[:, None], coords, 0.0)
        expected = bilinear_sample(maps[0], coords).data * inside[:, None]
        np.testing.assert_allclose(
            vol.data.reshape(3, -1).T, expected, atol=1e-12
        )

    def test_two_frames_fixed_weights_sum(self):
        cams, maps, grid = self._setup(n_frames=2)
        acc1 = _FixedAccumulator(3, [0.3, 0.7])
        combined = unproject(maps, cams, grid, acc1, stride=4)
        acc_a = _FixedAccumulator(3, [0.3])
        acc_b = _FixedAccumulator(3, [0.7])
        a = unproject(maps[:1], cams[:1], grid, acc_a, stride=4)
        b = unproject(maps[1:], cams[1:], grid, acc_b, stride=4)
        np.testing.assert_allclose(combined.data, a.data + b.data, atol=1e-12)

    def test_frame_permutation_invariance(self):
        rng = np.random.default_rng(7)
        cams = ring_cameras(3, 2.8, 0.0, 16)
        maps = [Tensor(rng.standard_normal((3, 4, 4))) for _ in range(3)]
        grid = VoxelGrid.zeros(4, 3)
        acc = Accumulator(3, np.random.default_rng(8), hidden=8)
        a = unproject(maps, cams, grid, acc, stride=4)
        order = [2, 0, 1]
        b = unproject([maps[i] for i in order], [cams[i] for i in order], grid, acc, stride=4)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_vertex_behind_all_cameras_pools_exact_zero(self):
        # single camera close to the origin looking outward: vertices behind
        # it must contribute nothing
        cam = Camera.look_at((0.0, 0.2, 0.0), (0.0, 2.0, 0.0), (0, 0, 1), 60.0,
                             8, 8, 0.05, 4.0)
        rng = np.random.default_rng(9)
        fmap = Tensor(rng.standard_normal((2, 2, 2)))
        grid = VoxelGrid.zeros(4, 2)
        acc = Accumulator(2, np.random.default_rng(10), hidden=6)
        vol = unproject([fmap], [cam], grid, acc, stride=4)
        verts = grid.vertex_positions()
        behind = verts[:, 1] < 0.15
        flat = vol.data.reshape(2, -1).T
        assert np.all(flat[behind] == 0.0)
        assert np.any(flat[~behind] != 0.0)

    def test_gradients_reach_encoder_and_accumulator(self):
        rng = np.random.default_rng(11)
        enc = Encoder2D(3, rng, widths=(3, 3))
        acc = Accumulator(3, rng, hidden=6)
        cams = ring_cameras(2, 2.8, 0.0, 8)
        frames = [rng.random((8, 8, 3)) for _ in range(2)]
        grid = VoxelGrid.zeros(4, 3)

        maps = encode_frames(enc, frames)
        vol = unproject(maps, cams, grid, acc)
        T.tensor_sum(T.mul(vol, vol)).backward()
        for name, p in {**enc.parameters(), **acc.parameters()}.items():
            assert p.grad is not None, name

    def test_gradients_match_finite_differences_on_small_instance(self):
        rng = np.random.default_rng(12)
        enc = Encoder2D(2, rng, widths=(2, 2))
        acc = Accumulator(2, rng, hidden=4)
        cams = ring_cameras(2, 2.6, 5.0, 8)
        frames = [rng.random((8, 8, 3)) for _ in range(2)]
        grid = VoxelGrid.zeros(4, 2)
        proj = rng.standard_normal((2, 4, 4, 4))

        params = {**{f"e.{k}": v for k, v in enc.parameters().items()},
                  **{f"a.{k}": v for k, v in acc.parameters().items()}}

        def loss():
            maps = encode_frames(enc, frames)
            vol = unproject(maps, cams, grid, acc)
            return T.tensor_sum(T.mul(vol, Tensor(proj)))

        out = loss()
        for p in params.values():
            p.zero_grad()
        out.backward()
        worst = 0.0
        for name, p in params.items():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)

            def f(arr, p=p):
                old = p.data
                p.data = arr
                val = loss().item()
                p.data = old
                return val

            fd = finite_difference(f, p.data.copy(), step=1e-5)
            rel = np.abs(analytic - fd) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
            worst = max(worst, rel.max())
        assert worst <= 1e-5

    def test_count_mismatch_rejected(self):
        acc = Accumulator(3, np.random.default_rng(0))
        with pytest.raises(ValidationError):
            unproject([Tensor(np.zeros((3, 2, 2)))], [], VoxelGrid.zeros(4, 3), acc)
