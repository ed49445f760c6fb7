import json

import numpy as np
import pytest

from srfkit.cameras import CameraIntrinsics, CameraView, Split, look_at
from srfkit.errors import ConfigurationError, SrfError
from srfkit.scenes import (
    AnalyticScene,
    RigSpec,
    emit_dataset,
    load_dataset,
    load_png,
    make_scene,
    save_png,
    trace_reference,
)

TINY_RIG = RigSpec(train_views=6, test_views=2, ood_views=1,
                   width=24, height=24, focal=28.8)


def test_sphere_sdf_values():
    scene = make_scene("sphere", radius=0.5)
    assert scene.sdf(np.zeros((1, 3)))[0] == pytest.approx(-0.5)
    assert scene.sdf(np.array([[0.5, 0, 0]]))[0] == pytest.approx(0.0)


def test_torus_sdf_value():
    scene = make_scene("torus", major_radius=0.5, minor_radius=0.2)
    assert scene.sdf(np.array([[0.5, 0, 0]]))[0] == pytest.approx(-0.2)


def test_box_and_composites_valid():
    for kind in ("box", "two_spheres", "checker_sphere"):
        scene = make_scene(kind)
        d = scene.sdf(np.array([[0.0, 0.0, 0.0], [0.9, 0.9, 0.9]]))
        assert d[0] < 0 < d[1]
        alb = scene.albedo(np.zeros((2, 3)))
        assert alb.min() >= 0 and alb.max() <= 1


def test_scene_extent_guard():
    with pytest.raises(ConfigurationError):
        make_scene("sphere", radius=0.9)
    with pytest.raises(ConfigurationError):
        make_scene("unknown_kind")


def _view(width=24, height=24, focal=28.8, center=(2.5, 0.2, 0.4)):
    return CameraView(
        pose=look_at(center),
        intrinsics=CameraIntrinsics(width=width, height=height, focal=focal),
    )


def test_trace_empty_scene_white():
    empty = AnalyticScene(
        name="void",
        sdf=lambda p: np.full(p.shape[:-1], 1e9),
        albedo=lambda p: np.ones(p.shape[:-1] + (3,)),
    )
    img = trace_reference(empty, _view())
    assert np.allclose(img.rgb, 1.0)
    assert not img.alpha.any()


def test_trace_sphere_silhouette_area():
    scene = make_scene("sphere", radius=0.5)
    view = _view(width=64, height=64, focal=76.8, center=(2.5, 0, 0))
    img = trace_reference(scene, view)
    # pinhole projection of a sphere: disk of radius f*r/sqrt(d^2 - r^2)
    projected = 76.8 * 0.5 / np.sqrt(2.5**2 - 0.5**2)
    expected = np.pi * projected**2
    assert img.alpha.sum() == pytest.approx(expected, rel=0.02)


def test_trace_alpha_binary_and_deterministic():
    scene = make_scene("two_spheres")
    view = _view(center=(1.8, -1.2, 0.9))
    a = trace_reference(scene, view)
    b = trace_reference(scene, view)
    assert np.array_equal(a.rgba, b.rgba)
    assert set(np.unique(a.alpha)) <= {0.0, 1.0}


def test_trace_headlight_is_view_dependent():
    scene = make_scene("sphere")
    img1 = trace_reference(scene, _view(center=(2.5, 0, 0)))
    img2 = trace_reference(scene, _view(center=(0, 2.5, 0)))
    # same silhouette area, brightest at center of each view's disk
    c1 = img1.rgb[12, 12]
    assert img1.alpha[12, 12] == 1.0
    assert c1.max() > 0.1


def test_emit_dataset_counts_and_manifest(tmp_path):
    scene = make_scene("sphere")
    manifest = emit_dataset(scene, TINY_RIG, tmp_path / "ds", seed=0)
    data = json.loads(manifest.read_text())
    assert data["schema_version"] == 1
    splits = [v["split"] for v in data["views"]]
    assert splits.count("train") == 6
    assert splits.count("test") == 2
    assert splits.count("ood") == 1
    assert len(list((tmp_path / "ds" / "images").glob("*.png"))) == 9


def test_emit_default_view_counts(tmp_path):
    rig = RigSpec(width=8, height=8, focal=9.6)  # default 400/20/10 counts
    scene = make_scene("sphere")
    manifest = emit_dataset(scene, rig, tmp_path / "big", seed=0)
    data = json.loads(manifest.read_text())
    splits = [v["split"] for v in data["views"]]
    assert (splits.count("train"), splits.count("test"), splits.count("ood")) == (
        400, 20, 10,
    )


def test_emit_reemission_byte_identical(tmp_path):
    scene = make_scene("box")
    m1 = emit_dataset(scene, TINY_RIG, tmp_path / "a", seed=3)
    m2 = emit_dataset(scene, TINY_RIG, tmp_path / "b", seed=3)
    assert m1.read_bytes() == m2.read_bytes()
    for img in sorted((tmp_path / "a" / "images").iterdir()):
        twin = tmp_path / "b" / "images" / img.name
        assert img.read_bytes() == twin.read_bytes()


def test_load_round_trip(tmp_path):
    scene = make_scene("checker_sphere")
    manifest = emit_dataset(scene, TINY_RIG, tmp_path / "ds", seed=1)
    views, images = load_dataset(manifest)
    assert len(views) == len(images) == 9
    data = json.loads(manifest.read_text())
    for rec, view, img in zip(data["views"], views, images):
        stored = np.asarray(rec["pose"]).reshape(4, 4)
        assert np.max(np.abs(stored - view.pose)) < 1e-12
        assert img.width == TINY_RIG.width
        # pixels 8-bit exact round trip
        reloaded = load_png(tmp_path / "ds" / rec["image"])
        assert np.array_equal(reloaded.rgba, img.rgba)


def test_load_missing_image(tmp_path):
    scene = make_scene("sphere")
    manifest = emit_dataset(scene, TINY_RIG, tmp_path / "ds", seed=0)
    victim = next((tmp_path / "ds" / "images").glob("*.png"))
    victim.unlink()
    with pytest.raises(SrfError) as err:
        load_dataset(manifest)
    assert victim.name in str(err.value)


def test_load_dimension_mismatch(tmp_path):
    scene = make_scene("sphere")
    manifest = emit_dataset(scene, TINY_RIG, tmp_path / "ds", seed=0)
    from srfkit.scenes import ImageBuffer

    victim = next((tmp_path / "ds" / "images").glob("*.png"))
    save_png(ImageBuffer(8, 8, np.zeros((8, 8, 4), dtype=np.float32)), victim)
    with pytest.raises(SrfError):
        load_dataset(manifest)


def test_load_malformed_manifest(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text("{not json")
    with pytest.raises(SrfError):
        load_dataset(path)


def test_load_empty_views(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({
        "schema_version": 1,
        "intrinsics": {"width": 16, "height": 16, "focal": 19.2},
        "views": [],
    }))
    views, images = load_dataset(path)
    assert views == [] and images == []
