import warnings

import numpy as np
import pytest

from mvnet.errors import InvalidInputError
from mvnet.geometry import CameraExtrinsics, overlap_ratio
from mvnet.pipeline.dataset import (
    load_dataset,
    load_scene,
    read_pbm,
    read_pfm,
    read_pgm16,
    read_ppm,
    save_scene,
    scene_dirs,
    write_pbm,
    write_pfm,
    write_pgm16,
    write_ppm,
)
from mvnet.pipeline.scenes import CEILING, FLOOR, WALL, SceneSpec, generate_scene


def _wall_scene(extra_pose=None):
    eye = np.array([3.0, 3.0, 1.5])
    poses = [CameraExtrinsics.look_at(eye, eye + [1.0, 0.0, 0.0])] * 2
    if extra_pose is not None:
        poses.append(extra_pose)
    spec = SceneSpec(seed=0, room_extents=(6.0, 6.0, 3.0), object_count=0, trajectory=poses, resolution=(32, 32))
    return spec, generate_scene(spec)


def test_empty_room_wall_depth_matches_plane_intersection():
    spec, frames = _wall_scene()
    f = frames[0]
    intr = spec.intrinsics
    rows = np.arange(32)[:, None].repeat(32, 1)
    cols = np.arange(32)[None, :].repeat(32, 0)
    yn = (rows - intr.cy) / intr.fy
    xn = (cols - intr.cx) / intr.fx
    # far wall x = 6 is 3 m along the optical axis; floor/ceiling are 1.5 m above/below
    hits_wall = np.abs(yn) * 3.0 <= 1.5
    assert np.all(np.abs(xn) * 3.0 < 3.0)  # side walls are never reached first
    expected = np.where(hits_wall, 3.0, 1.5 / np.abs(yn))
    assert f.valid.all()
    np.testing.assert_allclose(f.depth, expected, rtol=0, atol=1e-12)
    assert np.all(f.depth[hits_wall] == 3.0)
    assert set(np.unique(f.labels[hits_wall])) == {WALL}
    assert set(np.unique(f.labels[~hits_wall])) <= {FLOOR, CEILING}


def test_same_pose_overlap_is_one():
    _, frames = _wall_scene()
    assert overlap_ratio(frames[0], frames[1]) == 1.0


def test_generation_is_deterministic():
    a, b = generate_scene(SceneSpec(seed=11)), generate_scene(SceneSpec(seed=11))
    for x, y in zip(a, b):
        assert np.array_equal(x.rgb, y.rgb) and np.array_equal(x.depth, y.depth)
        assert np.array_equal(x.extrinsics.R, y.extrinsics.R) and x.frame_id == y.frame_id


def test_camera_outside_room_is_excluded_with_warning():
    outside = CameraExtrinsics.look_at([9.0, 3.0, 1.5], [10.0, 3.0, 1.5])
    with pytest.warns(UserWarning, match="outside"):
        _, frames = _wall_scene(outside)
    assert len(frames) == 2


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        SceneSpec(frames=1)
    with pytest.raises(InvalidInputError):
        SceneSpec(room_extents=(1.0, -1.0, 1.0))


def test_default_scenes_have_neighbour_overlap_in_range():
    frames = generate_scene(SceneSpec(seed=0))
    assert len(frames) == 8
    o = [overlap_ratio(a, b) for a, b in zip(frames, frames[1:])]
    assert any(0.4 <= v <= 0.8 for v in o)


def test_image_codecs_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.uniform(0, 1, (5, 7, 3))
    write_ppm(tmp_path / "a.ppm", rgb)
    back = read_ppm(tmp_path / "a.ppm")
    assert np.abs(back - rgb).max() <= 0.5 / 255 + 1e-12
    depth = rng.uniform(0.1, 5, (5, 7))
    write_pfm(tmp_path / "a.pfm", depth)
    np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), depth.astype(np.float32))
    mask = rng.uniform(size=(5, 11)) > 0.5
    write_pbm(tmp_path / "a.pbm", mask)
    np.testing.assert_array_equal(read_pbm(tmp_path / "a.pbm"), mask)
    lab = rng.integers(0, 9, (5, 7))
    write_pgm16(tmp_path / "a.pgm", lab)
    np.testing.assert_array_equal(read_pgm16(tmp_path / "a.pgm"), lab)


def test_pfm_is_little_endian_bottom_up(tmp_path):
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    write_pfm(tmp_path / "d.pfm", img)
    raw = (tmp_path / "d.pfm").read_bytes()
    header, data = raw[: raw.index(b"-1.0\n") + 5], raw[raw.index(b"-1.0\n") + 5:]
    assert header.startswith(b"Pf\n2 2\n")
    assert np.frombuffer(data, "<f4").tolist() == [3.0, 4.0, 1.0, 2.0]


def test_truncated_image_rejected(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.zeros((4, 4, 3)))
    raw = (tmp_path / "a.ppm").read_bytes()
    (tmp_path / "a.ppm").write_bytes(raw[:-5])
    with pytest.raises(InvalidInputError):
        read_ppm(tmp_path / "a.ppm")


def test_scene_round_trip(tmp_path):
    frames = generate_scene(SceneSpec(seed=2))
    save_scene(tmp_path / "s0", frames)
    back = load_scene(tmp_path / "s0")
    assert [f.frame_id for f in back] == [f.frame_id for f in frames]
    for a, b in zip(frames, back):
        np.testing.assert_array_equal(a.valid, b.valid)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(b.depth[b.valid], a.depth[a.valid].astype(np.float32))
        np.testing.assert_array_equal(a.extrinsics.R, b.extrinsics.R)
        assert a.intrinsics == b.intrinsics
        assert np.abs(a.rgb - b.rgb).max() <= 0.5 / 255 + 1e-12


def test_manifest_layout(tmp_path):
    import json

    save_scene(tmp_path, generate_scene(SceneSpec(seed=2, frames=2)))
    m = json.loads((tmp_path / "manifest.json").read_text())
    e = m["frames"][0]
    assert set(e["intrinsics"]) == {"fx", "fy", "skew", "cx", "cy"}
    assert len(e["extrinsics"]["R"]) == 9 and len(e["extrinsics"]["T"]) == 3
    for stem in ("rgb_{}.ppm", "depth_{}.pfm", "valid_{}.pbm"):
        assert (tmp_path / stem.format(e["id"])).exists()


def test_dataset_discovery(tmp_path):
    for i in range(2):
        save_scene(tmp_path / f"scene_{i}", generate_scene(SceneSpec(seed=i, frames=2)))
    assert [p.name for p in scene_dirs(tmp_path)] == ["scene_0", "scene_1"]
    assert len(load_dataset(tmp_path)) == 2
    (tmp_path / "empty").mkdir()
    with pytest.raises(InvalidInputError):
        scene_dirs(tmp_path / "empty")
