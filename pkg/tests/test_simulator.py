import numpy as np
import pytest

from obsfusion.models import Box, CameraModel, Curb, LidarModel, Pose, SceneSpec
from obsfusion.scene_io import load_image, load_mask, load_scan, load_sequence
from obsfusion.simulator import (
    BOX,
    CURB,
    GROUND,
    MISS,
    OBSTACLE,
    ROAD,
    camera_pose,
    cast_rays,
    enumerate_crossings,
    gray_image,
    lidar_poses,
    raycast_scan,
    render_ground_truth,
    simulate_sequence,
)


def test_cast_rays_kinds():
    scene = SceneSpec(
        boxes=(Box(center=(0.0, 5.0, 0.5), size=(1.0, 1.0, 1.0)),),
        curbs=(Curb(offset=3.0, height=0.2),),
    )
    origin = np.array([0.0, 0.0, 1.0])
    dirs = np.array(
        [
            [0.0, 1.0, 0.0],  # box front face
            [0.0, 0.0, -1.0],  # straight down
            [1.0, 0.0, -0.1],  # passes over the curb edge, lands on its top
            [0.0, -1.0, 0.1],  # sky
        ]
    )
    hits = cast_rays(scene, origin, dirs)
    assert hits.kind.tolist() == [BOX, GROUND, CURB, MISS]
    assert hits.t[0] == pytest.approx(4.5)
    assert hits.t[1] == pytest.approx(1.0)
    assert hits.t[2] == pytest.approx(8.0)
    assert np.isinf(hits.t[3])
    assert hits.index.tolist() == [0, -1, 0, -1]


def test_raycast_scan_ranges_match_positions(box_scene):
    scan = raycast_scan(box_scene, Pose(np.eye(3), [0, 0, 1.75]))
    for ring, angle in zip(scan.rings, scan.ring_angles):
        if angle >= 0:
            assert len(ring) == 0
            continue
        assert np.allclose(np.linalg.norm(ring.position, axis=1), ring.range)
    ground = scan.rings[0]
    assert np.allclose(ground.position[:, 2], -1.75)


def test_range_noise_is_seeded(box_scene):
    scene = box_scene.model_copy(update={"range_noise": 0.01})
    pose = Pose(np.eye(3), [0, 0, 1.75])
    a = raycast_scan(scene, pose, rng=np.random.default_rng(1))
    b = raycast_scan(scene, pose, rng=np.random.default_rng(1))
    assert np.array_equal(a.rings[0].range, b.rings[0].range)
    assert not np.allclose(a.rings[0].range, 1.75 / np.sin(np.radians(15)), atol=1e-6)


def test_max_range_drops_far_returns():
    lidar = LidarModel(max_range=10.0)
    scan = raycast_scan(SceneSpec(lidar=lidar), Pose(np.eye(3), [0, 0, 1.75]))
    # rings -15, -13 and -11 reach the ground within 10 m
    assert [len(ring) for ring in scan.rings[:3]] == [1800] * 3
    assert all(len(ring) == 0 for ring in scan.rings[3:])


def test_enumerate_crossings(box_scene):
    crossings = enumerate_crossings(box_scene, Pose(np.eye(3), [0, 0, 1.75]))
    assert sorted(c.ring for c in crossings) == [2, 3]
    for crossing in crossings:
        assert crossing.box == 0
        assert crossing.detectable()
        assert crossing.entry_jump > 0.4
        assert crossing.first_azimuth < 90.0 < crossing.last_azimuth


def test_ground_truth_centroid():
    """A box straight ahead of a level camera lands on the principal point."""
    camera = CameraModel(fx=200, fy=200, cx=80, cy=60, width=161, height=121)
    scene = SceneSpec(boxes=(Box(center=(0.0, 10.0, 0.15), size=(1.0, 0.4, 0.3)),))
    rotation = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
    mask = render_ground_truth(scene, Pose(rotation, [0.0, 0.0, 0.15]), camera)
    rows, cols = np.nonzero(mask == OBSTACLE)
    assert cols.mean() == pytest.approx(80.0, abs=0.5)
    assert rows.mean() == pytest.approx(60.0, abs=0.5)
    assert mask[0, 0] == 0
    assert mask[120, 80] == ROAD


def test_camera_pose_follows_extrinsics(default_xi):
    pose = camera_pose(Pose(np.eye(3), [1.0, 2.0, 1.75]), default_xi)
    assert np.allclose(pose.translation, [1.0, 2.2, 1.5])
    # camera z (optical axis) points along world +y
    assert np.allclose(pose.rotation[:, 2], [0.0, 1.0, 0.0])
    assert np.allclose(pose.rotation[:, 1], [0.0, 0.0, -1.0])


def test_gray_levels():
    mask = np.array([[0, 1, 2]], dtype=np.uint8)
    assert gray_image(mask).tolist() == [[64, 128, 255]]
    noisy = gray_image(mask, 20.0, np.random.default_rng(0))
    assert noisy.dtype == np.uint8


def test_lidar_poses():
    scene = SceneSpec.model_validate(
        {"trajectory": {"n": 3, "step": 0.5, "lateral_step": 0.1, "start": 2.0}}
    )
    poses = lidar_poses(scene)
    assert [p.frame_id for p in poses] == [0, 1, 2]
    assert np.allclose(poses[2].translation, [0.2, 3.0, 1.75])


def test_simulate_sequence(tmp_path, box_scene):
    manifest = simulate_sequence(box_scene, tmp_path / "seq")
    assert manifest.frame_ids == [0, 1, 2]
    record = manifest.frame(0)
    mask = load_mask(record.mask_path)
    assert (mask == OBSTACLE).any()
    assert load_image(record.image_path).shape == (240, 320)
    assert load_scan(record.scan_path).n_points > 0
    camera, xi = manifest.calibration
    assert camera == box_scene.camera
    assert np.allclose(xi.vector(), box_scene.camera_xi.vector())


def test_simulation_is_deterministic(tmp_path, box_scene):
    scene = box_scene.model_copy(update={"range_noise": 0.02, "image_noise": 4.0})
    for name in ("a", "b"):
        simulate_sequence(scene, tmp_path / name)
    for path in sorted((tmp_path / "a").iterdir()):
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()
    assert load_sequence(tmp_path / "a").has_masks
