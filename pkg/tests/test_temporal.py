import numpy as np
import pytest

from obsfusion.config import RunConfig
from obsfusion.models import Pose, TemporalSettings
from obsfusion.pipeline import detect_frame
from obsfusion.projection import ConfidenceMap, exp_so3, project_points
from obsfusion.simulator import (
    camera_pose,
    gray_image,
    lidar_poses,
    raycast_scan,
    render_ground_truth,
)
from obsfusion.temporal import (
    DegenerateMatchError,
    DetectionMemory,
    MemoryEntry,
    TemporalDiagnostics,
    TrackedObstacle,
    cut_template,
    forward_project,
    propagate_and_aggregate,
    template_match,
    to_gray,
    update_memory,
)


def _textured(height=120, width=160, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 255, size=(height, width))


def test_memory_keeps_last_k():
    memory = DetectionMemory(2)
    for frame_id in (0, 1, 2):
        memory.append(MemoryEntry(frame_id, Pose.identity(frame_id), ()))
    assert memory.frame_ids == [1, 2]
    with pytest.raises(ValueError):
        memory.append(MemoryEntry(2, None, ()))
    with pytest.raises(ValueError):
        DetectionMemory(0)


def test_template_match_finds_shift():
    image = _textured()
    template = image[50:70, 60:80]
    # template centre is (70, 60); seed the search 7 px away
    result = template_match(template, image, (77.0, 55.0), 12, 0.6)
    assert result.center == (70.0, 60.0)
    assert result.score == pytest.approx(1.0)
    assert result.accepted


def test_template_match_outside_radius_is_rejected():
    image = _textured()
    template = _textured(20, 20, seed=9)
    result = template_match(template, image, (80.0, 60.0), 10, 0.9)
    assert not result.accepted
    assert -1.0 <= result.score < 0.9


def test_template_match_degenerate():
    image = _textured()
    with pytest.raises(DegenerateMatchError):
        template_match(np.full((8, 8), 3.0), image, (80, 60), 10)
    with pytest.raises(DegenerateMatchError):
        template_match(image[:8, :8], np.full((120, 160), 7.0), (80, 60), 10)
    with pytest.raises(DegenerateMatchError):
        template_match(image[:8, :8], image[:6, :6], (3, 3), 1)


def test_cut_template_near_border():
    gray = _textured()
    assert cut_template(gray, np.array([2.0, 50.0]), 16) is None
    patch = cut_template(gray, np.array([40.0, 50.0]), 16)
    assert patch.shape == (16, 16)
    assert np.array_equal(patch, gray[42:58, 32:48])


def test_to_gray_channels():
    image = np.zeros((2, 2, 3), dtype=np.uint8)
    image[..., 1] = 90
    assert to_gray(image, "green").max() == 90
    assert to_gray(image, "red").max() == 0
    assert 0 < to_gray(image).max() < 90


def _frames(scene):
    config = RunConfig(road="none")
    camera, xi = scene.camera, scene.camera_xi
    frames = []
    for pose in lidar_poses(scene):
        scan = raycast_scan(scene, pose)
        mask = render_ground_truth(scene, camera_pose(pose, xi), camera)
        detection = detect_frame(scan, config, camera, xi, None, pose.frame_id)
        frames.append((pose, gray_image(mask), detection))
    return frames


def _aggregate(scene, method):
    settings = TemporalSettings(method=method)
    camera, xi = scene.camera, scene.camera_xi
    memory = DetectionMemory(settings.k)
    diagnostics = TemporalDiagnostics()
    frames = _frames(scene)
    for pose, image, detection in frames[:4]:
        update_memory(
            memory, detection.segments, image, pose, pose.frame_id, camera, xi, settings
        )
    pose, image, detection = frames[4]
    confidence = propagate_and_aggregate(
        detection.confidence,
        memory,
        image,
        pose,
        camera,
        xi,
        5.0,
        settings,
        current_anchors=detection.anchors.pixels,
        diagnostics=diagnostics,
    )
    return frames, confidence, diagnostics


def _true_centroid_pixel(scene, frames):
    """Frame 3's obstacle centroid seen from frame 4."""
    pose3, _, detection3 = frames[3]
    pose4 = frames[4][0]
    centroid = detection3.segments[0].centroid
    moved = pose4.inverse().compose(pose3).apply(centroid[None, :])
    projection = project_points(moved, scene.camera, scene.camera_xi)
    return scene.camera.pixel_index(projection.pixels[0])


def _peak_near(confidence, pixel, radius):
    col, row = pixel
    rows = slice(row - radius, row + radius + 1)
    cols = slice(col - radius, col + radius + 1)
    return confidence.values[rows, cols].max()


def test_obstacle_is_missed_in_last_frame(temporal_scene):
    frames = _frames(temporal_scene)
    assert [len(d.segments) for _, _, d in frames] == [1, 1, 1, 1, 0]
    # only ring -5 crosses the box
    assert {d.segments[0].ring for _, _, d in frames[:4]} == {5}


def test_forward_projection_recovers_missed_obstacle(temporal_scene):
    frames, confidence, diagnostics = _aggregate(temporal_scene, "forward")
    pixel = _true_centroid_pixel(temporal_scene, frames)
    assert _peak_near(confidence, pixel, 2) >= 0.9
    assert diagnostics.forward_splats == 4


def test_template_matching_recovers_missed_obstacle(temporal_scene):
    frames, confidence, diagnostics = _aggregate(temporal_scene, "template")
    pixel = _true_centroid_pixel(temporal_scene, frames)
    assert diagnostics.accepted_matches >= 1
    assert _peak_near(confidence, pixel, 2) >= 0.9


def test_without_aggregation_the_map_is_empty(temporal_scene):
    frames, confidence, _ = _aggregate(temporal_scene, "none")
    pixel = _true_centroid_pixel(temporal_scene, frames)
    assert _peak_near(confidence, pixel, 2) == 0.0
    assert not confidence.values.any()


def test_redetected_obstacles_are_not_duplicated(temporal_scene):
    settings = TemporalSettings(method="forward")
    camera, xi = temporal_scene.camera, temporal_scene.camera_xi
    frames = _frames(temporal_scene)
    memory = DetectionMemory(settings.k)
    pose, image, detection = frames[0]
    update_memory(memory, detection.segments, image, pose, 0, camera, xi, settings)
    pose, image, detection = frames[1]
    diagnostics = TemporalDiagnostics()
    confidence = propagate_and_aggregate(
        detection.confidence,
        memory,
        image,
        pose,
        camera,
        xi,
        5.0,
        settings,
        current_anchors=detection.anchors.pixels,
        diagnostics=diagnostics,
    )
    assert diagnostics.redetected == 1
    assert diagnostics.forward_splats == 0
    assert np.array_equal(confidence.values, detection.confidence.values)


def test_forward_project_skips_entries_without_pose(temporal_scene):
    camera, xi = temporal_scene.camera, temporal_scene.camera_xi
    frames = _frames(temporal_scene)
    memory = DetectionMemory(4)
    pose, image, detection = frames[0]
    update_memory(memory, detection.segments, image, None, 0, camera, xi)
    diagnostics = TemporalDiagnostics()
    projection = forward_project(memory, frames[1][0], camera, xi, diagnostics)
    assert len(projection) == 0
    assert diagnostics.skipped_entries == 1


def _memory_of(points, pose):
    obstacle = TrackedObstacle(points, points.mean(axis=0), None, None)
    memory = DetectionMemory(4)
    memory.append(MemoryEntry(pose.frame_id, pose, (obstacle,)))
    return memory


def test_forward_projection_of_static_obstacle(small_camera, default_xi):
    world = np.array([[0.3, 15.0, 0.0], [-0.2, 15.2, 0.3], [0.0, 14.8, 0.15]])
    past = Pose(exp_so3(np.array([0.0, 0.0, 0.05])), np.array([0.3, 1.0, 1.75]), 0)
    current = Pose(exp_so3(np.array([0.0, 0.01, -0.02])), np.array([0.1, 4.0, 1.7]), 1)
    memory = _memory_of(past.inverse().apply(world), past)
    anchors = forward_project(memory, current, small_camera, default_xi)
    fresh = project_points(current.inverse().apply(world), small_camera, default_xi)
    assert len(anchors) == 3
    assert np.max(np.abs(anchors.pixels - fresh.pixels)) < 1e-6
    assert anchors.source.tolist() == [0, 0, 0]


def test_forward_translation_moves_anchors_outward(small_camera, default_xi):
    points = np.array([[1.5, 12.0, 0.8], [-1.5, 12.0, -1.2], [0.8, 11.0, -1.0]])
    past = Pose.identity(0)
    current = Pose(np.eye(3), np.array([0.0, 2.0, 0.0]), 1)
    before = project_points(points, small_camera, default_xi).pixels
    after = forward_project(_memory_of(points, past), current, small_camera, default_xi)
    principal = np.array([small_camera.cx, small_camera.cy])
    radius_before = np.linalg.norm(before - principal, axis=1)
    radius_after = np.linalg.norm(after.pixels - principal, axis=1)
    assert np.all(radius_after > radius_before)


def test_empty_memory_returns_current_map(small_camera, default_xi):
    current = ConfidenceMap.zeros(small_camera)
    result = propagate_and_aggregate(
        current,
        DetectionMemory(4),
        np.zeros(small_camera.shape, dtype=np.uint8),
        Pose.identity(),
        small_camera,
        default_xi,
        5.0,
    )
    assert result is current
