"""Synthetic blob scenes and camera rings."""

import numpy as np
import pytest

from voxeldiff.errors import ValidationError
from voxeldiff.scenes import (
    Blob,
    SceneSpec,
    bake_grid,
    blob_fields,
    gen_synthetic_scene,
    random_scene_spec,
    ring_cameras,
)


class TestBlobFields:
    def test_density_peaks_at_center(self):
        blob = Blob(center=(0.1, -0.2, 0.3), radius=0.3, peak=10.0, rgb=(1, 0, 0))
        pts = np.array([[0.1, -0.2, 0.3], [0.9, 0.9, 0.9]])
        density, color = blob_fields([blob], pts)
        assert density[0] == pytest.approx(10.0)
        assert density[1] < 0.1
        np.testing.assert_allclose(color[0], [1, 0, 0])

    def test_color_is_density_weighted_mix(self):
        blobs = [
            Blob(center=(0, 0, 0), radius=0.5, peak=4.0, rgb=(1, 0, 0)),
            Blob(center=(0, 0, 0), radius=0.5, peak=12.0, rgb=(0, 1, 0)),
        ]
        _d, color = blob_fields(blobs, np.zeros((1, 3)))
        np.testing.assert_allclose(color[0], [0.25, 0.75, 0.0], atol=1e-12)

    def test_zero_density_means_zero_color(self):
        _d, color = blob_fields([], np.zeros((2, 3)))
        assert np.all(color == 0.0)

    def test_invalid_blobs_rejected(self):
        with pytest.raises(ValidationError):
            Blob(center=(0, 0, 0), radius=0.0, peak=1.0, rgb=(1, 1, 1))
        with pytest.raises(ValidationError):
            SceneSpec(blobs=[Blob(center=(2.0, 0, 0), radius=0.2, peak=1.0, rgb=(1, 1, 1))])


class TestRingCameras:
    def test_equator_ring_geometry(self):
        cams = ring_cameras(8, 3.0, 0.0, 16)
        assert len(cams) == 8
        for cam in cams:
            center = cam.center()
            assert np.linalg.norm(center) == pytest.approx(3.0, abs=1e-9)
            assert center[2] == pytest.approx(0.0, abs=1e-12)

    def test_elevation_lifts_cameras(self):
        cams = ring_cameras(4, 2.0, 30.0, 8)
        for cam in cams:
            assert cam.center()[2] == pytest.approx(1.0, abs=1e-9)

    def test_azimuth_offset_rotates(self):
        a = ring_cameras(4, 2.0, 0.0, 8)[0].center()
        b = ring_cameras(4, 2.0, 0.0, 8, azimuth_offset=np.pi / 4)[0].center()
        assert not np.allclose(a, b)


class TestSyntheticScene:
    def test_zero_blobs_give_background_only(self):
        spec = SceneSpec(blobs=[], grid_resolution=8, camera_count=3, image_size=8,
                         samples_per_ray=8)
        scene = gen_synthetic_scene(spec)
        for frame in scene.frames:
            assert np.all(frame.image == 0.0)

    def test_centered_opaque_blob_visible_from_every_camera(self):
        spec = SceneSpec(
            blobs=[Blob(center=(0, 0, 0), radius=0.35, peak=20.0, rgb=(1, 1, 1))],
            grid_resolution=16, camera_count=6, image_size=9, samples_per_ray=24,
        )
        scene = gen_synthetic_scene(spec)
        for frame in scene.frames:
            center = frame.image[4, 4]
            assert center.mean() > 0.5

    def test_fixed_seed_reproduces_scene_bitwise(self):
        a = gen_synthetic_scene(random_scene_spec(7, image_size=8, camera_count=2,
                                                  grid_resolution=8, samples_per_ray=8))
        b = gen_synthetic_scene(random_scene_spec(7, image_size=8, camera_count=2,
                                                  grid_resolution=8, samples_per_ray=8))
        assert np.array_equal(a.grid.features.data, b.grid.features.data)
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.image, fb.image)

    def test_grid_matches_analytic_fields_at_vertices(self):
        spec = random_scene_spec(8, grid_resolution=8)
        grid = bake_grid(spec)
        pts = grid.vertex_positions()
        density, color = blob_fields(spec.blobs, pts)
        np.testing.assert_allclose(grid.features.data[0].ravel(), density, atol=1e-12)
        np.testing.assert_allclose(
            grid.features.data[1:].reshape(3, -1).T, color, atol=1e-12
        )
