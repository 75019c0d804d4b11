import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvcorr.errors import BehindCameraError, CameraError, InvalidDepthError
from mvcorr.geometry import (
    CameraParams, back_project, geometric_match, look_at, match_pixels, project, relative_transform,
)


def plane_homography(ca, cb):
    """Image-to-image homography induced by the world plane z = 0, built from K [r1 r2 t]."""
    def h(cam):
        m = cam.w2c
        return cam.K @ np.column_stack([m[:3, 0], m[:3, 1], m[:3, 3]])
    return h(cb) @ np.linalg.inv(h(ca))


def apply_h(h, x, y):
    p = h @ np.stack([x, y, np.ones_like(x)])
    return p[0] / p[2], p[1] / p[2]


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


class TestCamera:
    def test_identity_camera_projects_axis_to_principal_point(self):
        cam = CameraParams(100.0, 100.0, 50.0, 40.0, np.eye(4), 101, 81)
        assert project((0.0, 0.0, 5.0), cam) == pytest.approx((50.0, 40.0, 5.0))
        assert project((1.0, -2.0, 4.0), cam) == pytest.approx((75.0, -10.0, 4.0))

    def test_back_project_simple(self):
        cam = CameraParams(100.0, 100.0, 50.0, 40.0, np.eye(4), 101, 81)
        np.testing.assert_allclose(back_project((75.0, -10.0), 4.0, cam), [1.0, -2.0, 4.0])

    def test_behind_camera(self):
        cam = CameraParams(10.0, 10.0, 5.0, 5.0, np.eye(4), 10, 10)
        with pytest.raises(BehindCameraError):
            project((0.0, 0.0, -1.0), cam)

    def test_nonpositive_depth(self):
        cam = CameraParams(10.0, 10.0, 5.0, 5.0, np.eye(4), 10, 10)
        with pytest.raises(InvalidDepthError):
            back_project((1.0, 1.0), 0.0, cam)

    @pytest.mark.parametrize("w2c", [np.diag([1.0, 1.0, -1.0, 1.0]), np.diag([2.0, 1.0, 1.0, 1.0])])
    def test_improper_rotation_rejected(self, w2c):
        with pytest.raises(CameraError):
            CameraParams(10.0, 10.0, 5.0, 5.0, w2c, 10, 10)

    def test_look_at_orientation(self):
        m = look_at((0.0, 0.0, 4.0), (0.0, 0.0, 0.0))
        cam = CameraParams(10.0, 10.0, 5.0, 5.0, m, 11, 11)
        # forward axis points at the target, world +y appears upwards (smaller image y)
        assert project((0.0, 0.0, 0.0), cam)[:2] == pytest.approx((5.0, 5.0))
        assert project((0.0, 1.0, 0.0), cam)[1] < 5.0
        np.testing.assert_allclose(cam.center, [0.0, 0.0, 4.0], atol=1e-12)

    def test_roundtrip_1000_samples(self, rng):
        worst = 0.0
        for _ in range(1000):
            rot = random_rotation(rng)
            w2c = np.eye(4)
            w2c[:3, :3] = rot
            w2c[:3, 3] = rng.normal(size=3)
            cam = CameraParams(rng.uniform(50, 500), rng.uniform(50, 500), rng.uniform(0, 63), rng.uniform(0, 63),
                               w2c, 64, 64)
            px = rng.uniform(0, 64, size=2)
            z = rng.uniform(0.1, 50)
            x, y, zz = project(back_project(px, z, cam), cam)
            worst = max(worst, abs(x - px[0]), abs(y - px[1]), abs(zz - z) / z)
        assert worst < 1e-6

    def test_relative_transform_composes(self, rng):
        a = CameraParams(10.0, 10.0, 5.0, 5.0, look_at((1.0, 0.0, 4.0), (0, 0, 0)), 10, 10)
        b = CameraParams(10.0, 10.0, 5.0, 5.0, look_at((-1.0, 0.5, 4.0), (0, 0, 0)), 10, 10)
        p = rng.normal(size=3)
        pa = a.w2c @ np.append(p, 1)
        pb = b.w2c @ np.append(p, 1)
        np.testing.assert_allclose(relative_transform(a, b) @ pa, pb[:3], atol=1e-12)


class TestMatchOnPlane:
    def test_same_view_is_identity(self, plane_scene):
        m = geometric_match((40.0, 50.0), 1, 1, plane_scene.batch)
        assert (m.x, m.y, m.valid) == (40.0, 50.0, True)

    def test_matches_homography(self, plane_scene):
        batch = plane_scene.batch
        ys, xs = np.mgrid[0:128:3, 0:128:3].astype(np.float64)
        for s, a in [(0, 1), (1, 3), (3, 0), (2, 1)]:
            hx, hy = apply_h(plane_homography(batch.cameras[s], batch.cameras[a]), xs.ravel(), ys.ravel())
            x, y, _, ok = match_pixels(xs, ys, s, a, batch)
            inside = (hx > 1) & (hx < 126) & (hy > 1) & (hy < 126)
            assert ok[inside].mean() > 0.99
            err = np.hypot(x - hx, y - hy)[ok & inside]
            assert err.max() < 1e-3

    def test_symmetry(self, plane_scene):
        # the reverse transfer reads depth at the nearest pixel, so it is exact only to a fraction of a pixel
        batch = plane_scene.batch
        ys, xs = np.mgrid[4:124:5, 4:124:5].astype(np.float64)
        x, y, _, ok = match_pixels(xs, ys, 0, 2, batch)
        bx, by, _, ok2 = match_pixels(x[ok], y[ok], 2, 0, batch)
        assert ok2.mean() > 0.99
        np.testing.assert_allclose(bx[ok2], xs.ravel()[ok][ok2], atol=0.2)
        np.testing.assert_allclose(by[ok2], ys.ravel()[ok][ok2], atol=0.2)

    def test_rigid_invariance(self, plane_scene, rng):
        """Moving the world and all cameras together leaves pixel transfer unchanged."""
        from mvcorr.io import MultiViewBatch

        batch = plane_scene.batch
        rigid = np.eye(4)
        rigid[:3, :3] = random_rotation(rng)
        rigid[:3, 3] = rng.normal(size=3)
        moved = MultiViewBatch(batch.images, batch.depths, [c.transformed(rigid) for c in batch.cameras])
        ys, xs = np.mgrid[0:128:7, 0:128:7].astype(np.float64)
        x1, y1, z1, ok1 = match_pixels(xs, ys, 0, 1, batch)
        x2, y2, z2, ok2 = match_pixels(xs, ys, 0, 1, moved)
        assert np.array_equal(ok1, ok2)
        np.testing.assert_allclose(x1, x2, atol=1e-8)
        np.testing.assert_allclose(z1, z2, atol=1e-8)


def erode(mask, r):
    out = mask.copy()
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            out &= np.roll(np.roll(mask, dy, 0), dx, 1)
    return out


class TestOcclusion:
    def test_occluded_pixels_invalid(self, occluder_scene):
        """Pixels occluded by more than the pixel tolerance are always caught."""
        batch = occluder_scene.batch
        table = occluder_scene.oracle(0)
        ys, xs = np.mgrid[0:128, 0:128].astype(np.float64)
        for a in (1, 2, 3):
            ox, oy, vis = table[:, :, a, 0], table[:, :, a, 1], table[:, :, a, 2] > 0
            inside = (ox >= 0) & (ox < 128) & (oy >= 0) & (oy < 128)
            occ = inside & ~vis & (table[:, :, 0, 2] > 0)
            _, _, _, ok = match_pixels(xs, ys, 0, a, batch)
            ok = ok.reshape(128, 128)
            deep = erode(occ, 2)
            assert deep.any()
            assert np.all(~ok[deep])
            assert (~ok[vis]).mean() < 0.01

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.0, 127.0), st.floats(0.0, 127.0))
    def test_valid_matches_in_bounds(self, occluder_scene, x, y):
        m = geometric_match((x, y), 0, 2, occluder_scene.batch)
        if m.valid:
            assert 0 <= m.x < 128 and 0 <= m.y < 128 and m.z_cam > 0
