import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uformer360 import geometry as G


class TestDirections:
    def test_pixel_centre_convention(self):
        d = G.pix_to_dir(0, 0, 4, 8)
        theta, phi = np.pi / 8, np.pi / 8 - np.pi
        np.testing.assert_allclose(d, [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 63.99), st.floats(0, 127.999))
    def test_roundtrip(self, r, c):
        r2, c2 = G.dir_to_pix(G.coords_to_dir(r, c, 64, 128), 64, 128)
        assert abs(r2 - r) < 1e-6
        assert abs((c2 - c + 64) % 128 - 64) < 1e-6

    def test_columns_wrap_into_range(self):
        _, c = G.dir_to_pix(G.coords_to_dir(10.0, 130.0, 64, 128), 64, 128)
        assert c == pytest.approx(2.0)

    def test_unit_length(self):
        d = G.pixel_dirs(16, 32)
        np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0)


class TestSolidAngle:
    @pytest.mark.parametrize("H", [4, 64, 256])
    def test_sums_to_sphere(self, H):
        assert abs(G.solid_angle_map(H, 2 * H).sum() - 4 * np.pi) < 1e-9

    def test_symmetric_about_equator(self):
        w = G.solid_angle(np.arange(8), 8, 16)
        np.testing.assert_allclose(w, w[::-1])

    def test_weighted_mean_of_constant(self):
        assert G.weighted_mean(np.full((8, 16, 2), 3.0)) == pytest.approx([3.0, 3.0])


class TestErpImage:
    def test_requires_two_to_one(self):
        with pytest.raises(ValueError):
            G.ErpImage(np.zeros((4, 4, 3)))

    def test_rejects_unknown_domain(self):
        with pytest.raises(ValueError):
            G.ErpImage(np.zeros((4, 8, 3)), "sRGB")


class TestWholePanoramaTransforms:
    def test_yaw_roll_is_lossless(self, rng):
        img = rng.random((8, 16, 3))
        np.testing.assert_array_equal(G.yaw_roll(G.yaw_roll(img, 5), -5), img)

    def test_yaw_rotate_integer_columns_is_a_roll(self, rng):
        img = rng.random((8, 16, 3))
        np.testing.assert_array_equal(G.yaw_rotate(img, 45.0), np.roll(img, 2, axis=1))

    def test_yaw_rotate_fraction_preserves_row_means(self, rng):
        img = rng.random((8, 16, 3))
        out = G.yaw_rotate(img, 20.0)
        np.testing.assert_allclose(out.mean(axis=1), img.mean(axis=1), atol=1e-12)

    def test_vertical_flip_involution(self, rng):
        img = rng.random((8, 16))
        np.testing.assert_array_equal(G.vertical_flip(G.vertical_flip(img)), img)

    def test_rotation_x_is_orthonormal(self):
        R = G.rotation_x(37.0)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-15)
        assert np.linalg.det(R) == pytest.approx(1.0)

    def test_pitch_90_moves_north_pole_to_equator(self):
        z = np.array([0.0, 0.0, 1.0])
        v = G.rotation_x(90.0) @ z
        assert abs(v[2]) < 1e-12

    def test_pitch_zero_is_identity(self, rng):
        img = rng.random((8, 16, 3))
        np.testing.assert_allclose(G.pitch_rotate(img, 0.0), img, atol=1e-12)

    def test_pitch_there_and_back_on_smooth_field(self):
        d = G.pixel_dirs(32, 64)
        img = 1 + d[..., :1] + 0.5 * d[..., 2:]   # linear in direction
        back = G.pitch_rotate(G.pitch_rotate(img, 90.0), -90.0)
        assert np.abs(back - img).max() < 0.05


class TestPolarExtend:
    def test_virtual_rows_are_half_turn_rolls(self, rng):
        img = rng.random((8, 16))
        ext = G.polar_extend(img, 2)
        np.testing.assert_array_equal(ext[1], np.roll(img[0], 8))
        np.testing.assert_array_equal(ext[0], np.roll(img[1], 8))
        np.testing.assert_array_equal(ext[-1], np.roll(img[-2], 8))
        np.testing.assert_array_equal(ext[2:-2], img)

    def test_virtual_row_is_geodesic_neighbour(self):
        H, W = 16, 32
        rows, _ = G.polar_extend_rows(H, 1)
        a = G.pix_to_dir(0, 3, H, W)
        b = G.pix_to_dir(rows[0], (3 + W // 2) % W, H, W)
        assert G.geodesic(a, b) == pytest.approx(np.pi / H)


class TestPerspective:
    def test_centre_ray_is_forward(self):
        d = G.perspective_dirs(60, 30, 10, 9, 9)
        fwd, _, _ = G.camera_basis(30, 10)
        np.testing.assert_allclose(d[4, 4], fwd, atol=1e-12)

    def test_basis_is_orthonormal(self):
        B = np.stack(G.camera_basis(123.0, -40.0))
        np.testing.assert_allclose(B @ B.T, np.eye(3), atol=1e-12)

    def test_edge_rays_span_fov(self):
        d = G.perspective_dirs(90, 0, 0, 5, 100)
        # outermost pixel centres are just inside the half-angle
        ang = np.degrees(G.geodesic(d[2, 0], d[2, -1]))
        assert 88 < ang < 90

    def test_crop_and_back_on_constant(self):
        pano = np.full((32, 64, 3), 0.25)
        persp = G.erp_to_perspective(pano, 60, 0, 0, 32, 32)
        erp, mask = G.perspective_to_erp(persp, 60, 0, 0, 32, 64)
        assert mask.sum() > 0
        np.testing.assert_allclose(erp.values[mask > 0], 0.25)
        assert np.all(erp.values[mask == 0] == 0)

    def test_mask_area_matches_frustum(self):
        H, W = 128, 256
        _, mask = G.perspective_to_erp(np.ones((8, 8)), 90, 0, 0, H, W)
        area = (mask * G.solid_angle_map(H, W)).sum()
        assert area == pytest.approx(G.frustum_solid_angle(90), rel=0.02)

    def test_frustum_of_90_is_a_cube_face(self):
        assert G.frustum_solid_angle(90) == pytest.approx(4 * np.pi / 6)
