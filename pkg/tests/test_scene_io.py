import numpy as np
import pytest

from obsfusion.models import CameraModel, ExtrinsicsSE3, Pose
from obsfusion.projection import ConfidenceMap
from obsfusion.ring_geometry import Ring, RingScan
from obsfusion.scene_io import (
    AzimuthOrderError,
    CalibrationError,
    ConfidenceMapError,
    ManifestError,
    MaskFormatError,
    NonFiniteRangeError,
    PoseFormatError,
    RangeMismatchError,
    RingIndexError,
    SceneFormatError,
    ScanHeaderError,
    ScanLineError,
    load_calibration,
    load_confidence_map,
    load_image,
    load_mask,
    load_poses,
    load_scan,
    load_sequence,
    parse_scene_text,
    save_calibration,
    save_confidence_map,
    save_image,
    save_mask,
    save_poses,
    save_scan,
)

HEADER = "#VLP16-SCAN v1\n"


def _point(ring, az, rng, alpha=-15.0):
    a, p = np.radians(alpha), np.radians(az)
    x, y, z = rng * np.cos(a) * np.cos(p), rng * np.cos(a) * np.sin(p), rng * np.sin(a)
    return f"{ring} {az} {rng} {x:.9f} {y:.9f} {z:.9f}\n"


def test_load_scan_sorts_by_azimuth(tmp_path):
    path = tmp_path / "scan.txt"
    path.write_text(
        HEADER + _point(0, 10.0, 5.0) + _point(0, 2.0, 5.0) + _point(3, 1.0, 7.0)
    )
    scan = load_scan(path)
    assert len(scan.rings) == 16
    assert scan.rings[0].azimuth.tolist() == [2.0, 10.0]
    assert len(scan.rings[3]) == 1
    assert scan.n_points == 3


def test_load_scan_header_only(tmp_path):
    path = tmp_path / "scan.txt"
    path.write_text(HEADER)
    scan = load_scan(path)
    assert scan.n_points == 0
    assert len(scan.rings) == 16


def test_scan_round_trip_keeps_ring_angles(tmp_path):
    angles = (-4.0, -2.0, 0.0)
    position = np.array([[5.0, 0.0, 0.0], [0.0, 6.0, 0.0]])
    ring = Ring(np.array([0.0, 90.0]), np.array([5.0, 6.0]), position)
    scan = RingScan((Ring.empty(), ring, Ring.empty()), angles)
    path = save_scan(scan, tmp_path / "scan.txt")
    loaded = load_scan(path)
    assert loaded.ring_angles == angles
    assert np.allclose(loaded.rings[1].position, position)


@pytest.mark.parametrize(
    "body, error, line",
    [
        ("0 1.0 5.0 1.0 2.0\n", ScanLineError, 2),
        ("0 1.0 abc 1.0 2.0 3.0\n", ScanLineError, 2),
        ("16 1.0 5.0 5.0 0.0 0.0\n", RingIndexError, 2),
        ("0 1.0 nan 5.0 0.0 0.0\n", NonFiniteRangeError, 2),
        ("0 1.0 5.0 1.0 0.0 0.0\n", RangeMismatchError, 2),
        ("0 360.0 5.0 5.0 0.0 0.0\n", AzimuthOrderError, 2),
    ],
)
def test_scan_line_errors(tmp_path, body, error, line):
    path = tmp_path / "scan.txt"
    path.write_text(HEADER + body)
    with pytest.raises(error) as info:
        load_scan(path)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_scan_duplicate_azimuth(tmp_path):
    path = tmp_path / "scan.txt"
    path.write_text(
        HEADER + _point(0, 3.0, 5.0) + _point(0, 1.0, 5.0) + _point(0, 3.0, 6.0)
    )
    with pytest.raises(AzimuthOrderError) as info:
        load_scan(path)
    assert info.value.line in (2, 4)


def test_scan_missing_header(tmp_path):
    path = tmp_path / "scan.txt"
    path.write_text(_point(0, 3.0, 5.0))
    with pytest.raises(ScanHeaderError):
        load_scan(path)


def test_calibration_round_trip(tmp_path):
    camera = CameraModel(fx=700.5, fy=701, cx=640, cy=360, width=1280, height=720)
    xi = ExtrinsicsSE3.from_vector([0.01, -0.25, -0.2, 1.5707963, 0.001, -0.002])
    path = save_calibration(camera, xi, tmp_path / "c.txt")
    loaded_camera, loaded_xi = load_calibration(path)
    assert loaded_camera == camera
    assert np.array_equal(loaded_xi.vector(), xi.vector())


@pytest.mark.parametrize(
    "text, key",
    [
        ("fx=1\nfy=1\ncx=0\ncy=0\nwidth=2\nheight=2\n", "xi"),
        ("fx=1\nfx=1\n", "fx"),
        ("fx=1\nfocal=2\n", "focal"),
    ],
)
def test_calibration_key_errors(tmp_path, text, key):
    path = tmp_path / "c.txt"
    path.write_text(text)
    with pytest.raises(CalibrationError) as info:
        load_calibration(path)
    assert info.value.key == key


def test_calibration_rejects_large_rotation(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("fx=1\nfy=1\ncx=0\ncy=0\nwidth=2\nheight=2\nxi=0 0 0 3.2 0 0\n")
    with pytest.raises(CalibrationError):
        load_calibration(path)


def test_poses_round_trip(tmp_path):
    c, s = np.cos(0.3), np.sin(0.3)
    turn = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    poses = [Pose.identity(0), Pose(turn, [1, 2, 3], 1)]
    loaded = load_poses(save_poses(poses, tmp_path / "poses.txt"))
    assert [p.frame_id for p in loaded] == [0, 1]
    assert np.allclose(loaded[1].matrix(), poses[1].matrix())


def test_poses_reject_non_rotation(tmp_path):
    path = tmp_path / "poses.txt"
    path.write_text("1 0 0 0 0 1 0 0 0 0 2 0\n")
    with pytest.raises(PoseFormatError) as info:
        load_poses(path)
    assert info.value.line == 1


def test_mask_round_trip(tmp_path):
    mask = np.zeros((6, 8), dtype=np.uint8)
    mask[2:4, 1:5] = 1
    mask[3, 3] = 2
    assert np.array_equal(load_mask(save_mask(mask, tmp_path / "m.png")), mask)


def test_mask_rejects_unknown_label(tmp_path):
    with pytest.raises(MaskFormatError):
        save_mask(np.full((2, 2), 7, dtype=np.uint8), tmp_path / "m.png")


def test_color_image_round_trip(tmp_path):
    image = np.zeros((4, 5, 3), dtype=np.uint8)
    image[..., 0] = 200
    loaded = load_image(save_image(image, tmp_path / "i.png"))
    assert np.array_equal(loaded, image)


def test_confidence_map_quantization(tmp_path):
    values = np.array([[0.0, 0.5], [1.0, 0.25]])
    path = save_confidence_map(ConfidenceMap(values), tmp_path / "c.png")
    loaded = load_confidence_map(path)
    assert np.max(np.abs(loaded.values - values)) <= 0.5 / 65535 + 1e-12
    assert loaded.values[1, 0] == 1.0


def test_confidence_map_out_of_range(tmp_path):
    with pytest.raises(ConfidenceMapError):
        save_confidence_map(np.array([[1.5]]), tmp_path / "c.png")


def test_scene_text_errors():
    with pytest.raises(SceneFormatError) as info:
        parse_scene_text("box=0 10 0.25 0.5 0.5 0.5\nwall=3\n")
    assert info.value.line == 2
    with pytest.raises(SceneFormatError):
        parse_scene_text("box=0 10 0.25\n")


def test_scene_text_trajectory():
    doc = parse_scene_text("trajectory=straight 4 0.5 0.1\n")
    expected = {"kind": "straight", "n": 4, "step": 0.5, "lateral_step": 0.1}
    assert doc["trajectory"] == expected


def test_sequence_manifest(sequence_dir):
    manifest = load_sequence(sequence_dir)
    assert manifest.frame_ids == [0, 1, 2]
    assert manifest.has_masks
    record = manifest.frame(1)
    assert record.pose.translation[1] == pytest.approx(0.5)
    assert record.load_mask().shape == (240, 320)
    assert record.load_scan().n_points > 0
    camera, _ = manifest.calibration
    assert camera.width == 320
    with pytest.raises(ManifestError) as info:
        manifest.frame(9)
    assert info.value.frame_id == 9


def test_sequence_missing_scan(sequence_dir):
    (sequence_dir / "scan_000001.txt").unlink()
    with pytest.raises(ManifestError) as info:
        load_sequence(sequence_dir)
    assert info.value.frame_id == 1


def test_sequence_ids_must_increase(sequence_dir):
    (sequence_dir / "frames.txt").write_text("0\n2\n1\n")
    with pytest.raises(ManifestError) as info:
        load_sequence(sequence_dir)
    assert info.value.line == 3
