import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxalign.camera import (CameraError, CameraRig, DepthMap, backproject_depthmap,
                             backproject_pixel, backproject_pixels, fov_mask, in_fov,
                             project_point, project_points)
from voxalign.grid import GridDims, GridGeometry, voxel_centroid


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_rig(rng, size=(640, 480)):
    fx, fy = rng.uniform(100, 1000, 2)
    K = np.array([[fx, rng.uniform(-2, 2), rng.uniform(0, size[0])],
                  [0, fy, rng.uniform(0, size[1])], [0, 0, 1]])
    return CameraRig(K, random_rotation(rng), rng.uniform(-5, 5, 3), size)


def test_project_identity_pose():
    rig = CameraRig.from_intrinsics(2, 2, 0, 0, (10, 10))
    assert project_point((1, 2, 4), rig) == pytest.approx((0.5, 1.0, 4.0), abs=1e-15)


def test_optical_axis_hits_principal_point():
    rig = CameraRig.from_intrinsics(500, 400, 320.5, 240.25, (640, 480))
    assert project_point((0, 0, 1), rig) == pytest.approx((320.5, 240.25, 1.0), abs=1e-12)


def test_project_on_camera_plane_errors():
    rig = CameraRig.from_intrinsics(1, 1, 0, 0, (4, 4))
    with pytest.raises(CameraError):
        project_point((1, 1, 0), rig)


def test_negative_depth_is_returned_signed():
    rig = CameraRig.from_intrinsics(1, 1, 0, 0, (4, 4))
    assert project_point((1, 1, -2), rig)[2] == -2


def test_backproject_examples():
    rig = CameraRig.from_intrinsics(2, 2, 0, 0, (10, 10))
    np.testing.assert_allclose(backproject_pixel(0.5, 1.0, 4.0, rig), [1, 2, 4], atol=1e-15)
    rig2 = CameraRig.from_intrinsics(500, 500, 320, 240, (640, 480))
    np.testing.assert_allclose(backproject_pixel(320, 240, 7.5, rig2), [0, 0, 7.5], atol=1e-12)
    with pytest.raises(CameraError):
        backproject_pixel(1, 1, 0.0, rig)
    with pytest.raises(CameraError):
        backproject_pixel(1, 1, -1.0, rig)


def test_round_trip_random(rng):
    worst = 0.0
    for _ in range(50):
        rig = random_rig(rng)
        u = rng.uniform(0, 640, 20)
        v = rng.uniform(0, 480, 20)
        d = rng.uniform(0.5, 80, 20)
        pts = backproject_pixels(u, v, d, rig)
        uu, vv, zz = project_points(pts, rig)
        np.testing.assert_allclose(zz, d, rtol=1e-12)
        back = backproject_pixels(uu, vv, zz, rig)
        worst = max(worst, np.abs(back - pts).max())
    assert worst < 1e-9


def test_in_fov_boundaries():
    rig = CameraRig.from_intrinsics(1, 1, 0, 0, (10, 8))
    assert in_fov(-1, 5, 2, rig) is False
    assert in_fov(5, 5, -2, rig) is False
    assert in_fov(10 - 1 + 0.5, 5, 2, rig) is True
    assert in_fov(10, 5, 2, rig) is False
    assert in_fov(0, 0, 1e-6, rig) is True
    assert in_fov(3, 8, 1, rig) is False


def test_fov_mask_looking_away():
    geom = GridGeometry(GridDims(8, 8, 8), (0, 0, 0), 0.2)
    rig = CameraRig.look_at((-1, 0.8, 0.8), (-5, 0.8, 0.8), np.diag([50.0, 50.0, 1.0]), (64, 64))
    assert not fov_mask(geom, rig).any()


def test_fov_mask_wide_frustum():
    geom = GridGeometry(GridDims(8, 8, 8), (0, 0, 0), 0.2)
    K = np.array([[10.0, 0, 500], [0, 10.0, 500], [0, 0, 1]])
    rig = CameraRig.look_at((-5, 0.8, 0.8), (0.8, 0.8, 0.8), K, (1000, 1000))
    assert fov_mask(geom, rig).all()


def test_fov_mask_matches_brute_force():
    geom = GridGeometry(GridDims(8, 8, 8), (-0.8, -0.8, -0.8), 0.2)
    K = np.array([[40.0, 0, 32], [0, 40.0, 24], [0, 0, 1]])
    rig = CameraRig.look_at((0.05, -0.03, 0.02), (3, 0.4, 0.2), K, (64, 48))
    mask = fov_mask(geom, rig)
    for x in range(8):
        for y in range(8):
            for z in range(8):
                c = voxel_centroid((x, y, z), geom)
                cam = rig.R @ c + rig.t
                if cam[2] <= 0:
                    want = False
                else:
                    u = (rig.K[0, 0] * cam[0] + rig.K[0, 1] * cam[1]) / cam[2] + rig.K[0, 2]
                    v = rig.K[1, 1] * cam[1] / cam[2] + rig.K[1, 2]
                    want = 0 <= u < 64 and 0 <= v < 48
                assert mask[x, y, z] == want
    assert 0 < mask.sum() < 512


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(0, 40), st.integers(0, 40))
def test_fov_monotone_in_image_size(seed, dw, dh):
    rng = np.random.default_rng(seed)
    geom = GridGeometry(GridDims(6, 6, 6), (-0.6, -0.6, -0.6), 0.2)
    K = np.array([[30.0, 0, 20], [0, 30.0, 15], [0, 0, 1]])
    rig = CameraRig.look_at(rng.uniform(-2, 2, 3) + [-3, 0, 0], (0, 0, 0), K, (40, 30))
    big = CameraRig(rig.K, rig.R, rig.t, (40 + dw, 30 + dh))
    small_mask, big_mask = fov_mask(geom, rig), fov_mask(geom, big)
    assert not (small_mask & ~big_mask).any()


def test_rigid_invariance(rng):
    for _ in range(50):
        rig = random_rig(rng)
        p = rng.uniform(-10, 10, 3)
        if abs((rig.R @ p + rig.t)[2]) < 1e-3:
            continue
        Q = random_rotation(rng)
        s = rng.uniform(-5, 5, 3)
        moved = Q @ p + s
        # x_cam = R Q^T (y - s) + t
        rig2 = CameraRig(rig.K, rig.R @ Q.T, rig.t - rig.R @ Q.T @ s, rig.image_size)
        a = np.array(project_point(p, rig))
        b = np.array(project_point(moved, rig2))
        np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-9)


def test_rig_validation():
    with pytest.raises(CameraError):
        CameraRig(np.diag([1.0, 1.0, 2.0]), np.eye(3), np.zeros(3), (4, 4))
    with pytest.raises(CameraError):
        CameraRig(np.eye(3), np.diag([1.0, 1.0, -1.0]), np.zeros(3), (4, 4))
    with pytest.raises(CameraError):
        CameraRig(np.eye(3), np.eye(3) * 1.001, np.zeros(3), (4, 4))
    with pytest.raises(CameraError):
        CameraRig(np.diag([-1.0, 1.0, 1.0]), np.eye(3), np.zeros(3), (4, 4))


def test_forward_x_rig_axes():
    rig = CameraRig.forward_x(np.diag([1.0, 1.0, 1.0]), (4, 4))
    cam = rig.R @ np.array([3.0, 0.0, 0.0]) + rig.t
    np.testing.assert_allclose(cam, [0, 0, 3])
    # left (+y) maps to image -x, up (+z) maps to image -y
    np.testing.assert_allclose(rig.R @ [0, 1.0, 0], [-1, 0, 0])
    np.testing.assert_allclose(rig.R @ [0, 0, 1.0], [0, -1, 0])


def test_backproject_depthmap_all_invalid():
    rig = CameraRig.from_intrinsics(10, 10, 4, 3, (8, 6))
    cloud = backproject_depthmap(DepthMap(np.zeros((6, 8))), rig)
    assert cloud.shape == (0, 3)


def test_backproject_depthmap_plane_and_order():
    rig = CameraRig.from_intrinsics(10, 10, 4, 3, (8, 6))
    d = np.full((6, 8), 2.5)
    d[0, 0] = -1
    cloud = backproject_depthmap(DepthMap(d), rig)
    assert cloud.shape == (47, 3)
    np.testing.assert_allclose(cloud[:, 2], 2.5)
    # row-major: second pixel of row 0 comes first, at pixel center (1.5, 0.5)
    np.testing.assert_allclose(cloud[0], [(1.5 - 4) / 10 * 2.5, (0.5 - 3) / 10 * 2.5, 2.5])


def test_depthmap_rejects_nonfinite():
    with pytest.raises(CameraError):
        DepthMap(np.array([[1.0, np.nan]]))
