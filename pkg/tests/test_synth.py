import json

import numpy as np
import pytest

from pxdepth.exceptions import ConfigError, DataError
from pxdepth.geometry import unproject
from pxdepth.synth import (
    GENERATOR_VERSION,
    MIN_SEPARATION,
    SceneSpec,
    _render,
    build_scene,
    generate_clip,
    generate_scene,
    group_clips,
    load_depth16,
    load_record,
    read_dataset,
    save_depth16,
    synthesize,
    write_dataset,
)


@pytest.mark.parametrize("texture", ["flat", "gradient", "checker"])
def test_scene_deterministic(texture):
    a = generate_scene(SceneSpec(seed=7, texture=texture))
    b = generate_scene(SceneSpec(seed=7, texture=texture))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1].values, b[1].values)
    assert a[0].dtype == np.float32 and a[0].shape == (64, 64, 3)
    assert a[0].min() >= 0 and a[0].max() <= 1


@pytest.mark.parametrize("seed", range(5))
def test_boundaries_have_large_depth_steps(seed):
    scene = build_scene(SceneSpec(seed=seed))
    _, depth, ids = _render(scene)
    for axis in (0, 1):
        a_ids, b_ids = (ids[1:], ids[:-1]) if axis == 0 else (ids[:, 1:], ids[:, :-1])
        a_d, b_d = (depth[1:], depth[:-1]) if axis == 0 else (depth[:, 1:], depth[:, :-1])
        boundary = a_ids != b_ids
        assert np.all(np.abs(a_d - b_d)[boundary] >= MIN_SEPARATION)


@pytest.mark.parametrize("n", [2, 4, 6])
def test_depth_modes_at_least_num_shapes(n):
    _, depth, _ = generate_scene(SceneSpec(seed=11, num_shapes=n))
    values, counts = np.unique(np.round(depth.values, 9), return_counts=True)
    modes = values[counts >= 12]
    assert len(modes) >= n


def test_no_flying_pixels():
    scene = build_scene(SceneSpec(seed=3))
    _, depth, ids = _render(scene)
    pts = unproject(depth, scene.K)
    z_of_shape = {k: s.depth for k, s in enumerate(scene.shapes)}
    flat_ids = ids[depth > 0]
    on_shape = flat_ids >= 0
    expected = np.array([z_of_shape[i] for i in flat_ids[on_shape]])
    assert np.array_equal(pts[on_shape, 2], expected)
    # background points satisfy Z = d0 + g Y
    bg = pts[~on_shape]
    np.testing.assert_allclose(bg[:, 2], scene.plane_depth + scene.plane_slope * bg[:, 1], atol=1e-9)


def test_spec_validation():
    with pytest.raises(ConfigError):
        SceneSpec(num_shapes=1)
    with pytest.raises(ConfigError):
        SceneSpec(depth_range=(2.0, 1.0))
    with pytest.raises(ConfigError):
        SceneSpec(num_shapes=8, depth_range=(1.0, 3.0))
    with pytest.raises(ConfigError):
        SceneSpec(texture="noise")


def test_clip_zero_motion_static():
    clip = generate_clip(SceneSpec(seed=1), 4)
    assert len(clip) == 4
    assert all(np.array_equal(clip.frames[0], f) for f in clip.frames)
    assert all(np.array_equal(clip.depths[0], d) for d in clip.depths)


def test_clip_parallax_matches_pinhole():
    dx = 0.05
    spec = SceneSpec(seed=1, num_shapes=2, camera_motion=(dx, 0.0, 0.0))
    scene = build_scene(spec)
    near = len(scene.shapes) - 1
    z = scene.shapes[near].depth
    _, d0, ids0 = _render(scene)
    _, d1, ids1 = _render(scene, (dx, 0.0, 0.0))
    m0, m1 = ids0 == near, ids1 == near
    for m in (m0, m1):
        assert not (m[:, 0].any() or m[:, -1].any() or m[0].any() or m[-1].any())
    shift = np.nonzero(m1)[1].mean() - np.nonzero(m0)[1].mean()
    assert shift == pytest.approx(-scene.K.fx * dx / z, abs=0.5)
    assert np.all(d1[m1] == z) and np.all(d0[m0] == z)


def test_clip_deterministic():
    spec = SceneSpec(seed=4, camera_motion=(0.03, 0.01, 0.0))
    a, b = generate_clip(spec, 3), generate_clip(spec, 3)
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.depths, b.depths)
    with pytest.raises(ConfigError):
        generate_clip(spec, 1)


def test_depth16_quantization(tmp_path, rng):
    d = rng.uniform(0.5, 9.0, size=(8, 8))
    d[0, 0] = 0.0
    save_depth16(tmp_path / "d.png", d)
    back = load_depth16(tmp_path / "d.png")
    assert not back.valid[0, 0]
    assert np.abs(back.values[back.valid] - d[back.valid]).max() <= 0.0005 + 1e-12


def test_dataset_roundtrip(tmp_path):
    samples = synthesize(3, seed=0)
    write_dataset(tmp_path, samples, split="train")
    write_dataset(tmp_path, synthesize(2, seed=1, clips=True, clip_length=3), split="val")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["generator_version"] == GENERATOR_VERSION
    recs = read_dataset(tmp_path, split="train")
    assert [r.id for r in recs] == [s.id for s in samples]
    for r, s in zip(recs, samples):
        loaded = load_record(r)
        assert np.abs(loaded.depth - s.depth).max() <= 0.0005 + 1e-12
        assert np.abs(loaded.image - s.image).max() <= 0.5 / 255 + 1e-6
    clips = group_clips(read_dataset(tmp_path, split="val"))
    assert len(clips) == 2 and all([r.frame for r in v] == [0, 1, 2] for v in clips.values())


def test_scan_without_manifest(tmp_path):
    write_dataset(tmp_path, synthesize(2, seed=0))
    (tmp_path / "manifest.json").unlink()
    assert [r.id for r in read_dataset(tmp_path)] == ["000000", "000001"]


def test_missing_intrinsics_named(tmp_path):
    recs = write_dataset(tmp_path, synthesize(1, seed=0))
    recs[0].intrinsics.unlink()
    with pytest.raises(DataError, match=recs[0].intrinsics.name):
        read_dataset(tmp_path)
    with pytest.raises(DataError):
        read_dataset(tmp_path / "absent")


def test_large_dataset_sorted_order(tmp_path):
    samples = synthesize(1000, seed=0, resolution=(16, 16))
    rev = list(reversed(samples))
    write_dataset(tmp_path, rev)
    ids = [r.id for r in read_dataset(tmp_path, validate=False)]
    assert ids == sorted(ids) and len(ids) == 1000
    assert ids == [r.id for r in read_dataset(tmp_path, validate=False)]
