# tests/test_scenes.py
import numpy as np
import pytest

from app.scenes import (SCENE_NAMES, Camera, CameraRig, box_sdf, make_scene, paraboloid_height, sphere_sdf,
                        tilt_angles)
from app.utils import ValidationError
from tests.conftest import top_camera


def test_primitive_distances():
    sphere = sphere_sdf((0.5, 0.5, 0.5), 0.3)
    assert sphere(np.array([[0.5, 0.5, 0.5]]))[0] == pytest.approx(-0.3)
    assert sphere(np.array([[0.5, 0.5, 0.9]]))[0] == pytest.approx(0.1)
    box = box_sdf((0.5, 0.5, 0.5), (0.1, 0.2, 0.3))
    assert box(np.array([[0.5, 0.5, 0.5]]))[0] == pytest.approx(-0.1)
    assert box(np.array([[0.7, 0.5, 0.5]]))[0] == pytest.approx(0.1)


def test_every_named_scene_builds():
    for name in SCENE_NAMES:
        scene = make_scene(name)
        s = scene.sdf(np.array([[0.5, 0.5, 0.05], [0.5, 0.5, 0.95]]))
        assert s.shape == (2,)
        assert s[1] > 0
    with pytest.raises(ValidationError, match="unknown scene"):
        make_scene("teapot")


def test_paraboloid_surface_has_zero_distance():
    scene = make_scene("paraboloid")
    x = np.array([0.5, 0.6, 0.7])
    y = np.array([0.5, 0.45, 0.55])
    z = paraboloid_height(x, y, base_z=0.25, height=0.15, radius=0.3)
    assert np.abs(scene.sdf(np.stack([x, y, z], -1))).max() < 1e-9


def test_analytic_normals_are_unit():
    scene = make_scene("sphere")
    pts = np.array([[0.5, 0.5, 0.8], [0.8, 0.5, 0.5]])
    n = scene.normals(pts)
    assert np.allclose(n, [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]], atol=1e-6)


def test_rig_has_37_poses_with_the_untilted_view_first():
    angles = tilt_angles()
    assert len(angles) == 37
    assert angles[0] == ("x", 0)
    assert CameraRig(n_views=9).pose_indices()[0] == 0
    assert len(CameraRig(n_views=9).pose_indices()) == 9
    assert CameraRig(every_k=4).pose_indices() == list(range(0, 37, 4))
    with pytest.raises(ValidationError):
        CameraRig(n_views=40).pose_indices()


def test_untilted_orthographic_rays_point_down_the_beam():
    cam = CameraRig(width=16, height=12, n_views=1).cameras()[0]
    origins, dirs = cam.rays()
    assert origins.shape == (12, 16, 3)
    assert np.allclose(dirs, [0.0, 0.0, -1.0])
    # columns run along +x, rows along +y
    assert origins[0, 1, 0] > origins[0, 0, 0]
    assert origins[1, 0, 1] > origins[0, 0, 1]
    assert np.allclose(origins[..., :2].mean(axis=(0, 1)), [0.5, 0.5])


def test_pinhole_rays_are_unit_and_share_the_centre():
    cam = CameraRig(width=8, height=6, model="pinhole", n_views=1).cameras()[0]
    origins, dirs = cam.rays()
    assert np.allclose(np.linalg.norm(dirs, axis=-1), 1.0)
    assert np.allclose(origins, cam.center)


def test_camera_rejects_bad_poses_and_models():
    pose = np.eye(4)
    pose[0, 0] = 2.0
    with pytest.raises(ValidationError, match="orthonormal"):
        Camera(pose, 4, 4)
    with pytest.raises(ValidationError):
        Camera(np.eye(4), 4, 4, model="fisheye")
    with pytest.raises(ValidationError):
        Camera(np.eye(4), 4, 4, model="pinhole", focal=0.0)


def test_camera_dict_form():
    cam = top_camera(16, 12)
    raw = cam.to_dict()
    assert len(raw["pose"]) == 16
    assert raw["intrinsics"] == {"model": "orthographic", "width": 16, "height": 12, "pixel_size": 1.25 / 16}
    back = Camera.from_dict(raw)
    assert np.array_equal(back.pose, cam.pose)
