import numpy as np
import pytest

from tofmask import scene
from tofmask.scene import Layer, LayeredScene, LightField
from tofmask.tensor import RngState


def _edge(fg=1000.0, bg=3000.0, size=24, **kw):
    params = {"size": size, "fg": fg, "bg": bg, "albedo": 0.8, **kw}
    return scene.preset_scene("edge", params, RngState(0))


def test_flat_scene_views_identical():
    lf = scene.render_lightfield(scene.preset_scene("flat", {"size": 16, "depth": 1500.0}, RngState(2)))
    assert lf.amplitude.shape == (9, 9, 16, 16)
    assert np.all(lf.view_depth == np.float32(1500.0))
    # focused on its only layer: no disparity at all
    assert np.all(lf.amplitude == lf.amplitude[4, 4])


def test_disparity_integer_shift():
    fg, bg = 1000.0, 3000.0
    baseline = 1.0 / (1 / fg - 1 / bg)  # one pixel of disparity per view step
    lf = scene.render_lightfield(_edge(fg, bg, split=12), baseline=baseline)
    for iu in range(9):
        u = iu - 4
        # u moves content along columns, by u pixels for the foreground
        row = lf.view_depth[iu, 4, 5]
        assert np.all(row[:12 + u] == fg) and np.all(row[12 + u:] == bg)
    col = lf.view_depth[4, 0, :, 3]
    assert np.all(col == fg)  # v shifts rows; a vertical edge is unaffected


def test_background_in_focus_does_not_move():
    lf = scene.render_lightfield(_edge(split=12), baseline=1125.0)
    bg_region = lf.view_depth[4, 4] == np.float32(3000.0)
    for iu in (0, 8):
        assert np.array_equal(lf.amplitude[iu, 4][:, 20:], lf.amplitude[4, 4][:, 20:])
    assert bg_region[:, 20:].all()


def test_central_view_matches_scene_layers():
    sc = _edge(split=10)
    lf = scene.render_lightfield(sc)
    d = scene.central_depth(lf)
    assert np.all(d[:, :10] == 1000.0) and np.all(d[:, 10:] == 3000.0)
    assert lf.layer_depths_mm == (1000.0, 3000.0)


@pytest.mark.parametrize("name", ["flat", "edge", "bars", "staircase", "disk"])
def test_presets_render(name):
    sc = scene.preset_scene(name, {"size": 16}, RngState(1))
    lf = scene.render_lightfield(sc, 3, 3)
    assert lf.amplitude.min() >= 0 and lf.amplitude.max() <= 1
    assert set(np.unique(lf.view_depth)) <= set(np.float32(sc.depths))


def test_texture_is_seeded():
    a = scene.preset_scene("flat", {"size": 8}, RngState(5)).layers[0].albedo
    b = scene.preset_scene("flat", {"size": 8}, RngState(5)).layers[0].albedo
    c = scene.preset_scene("flat", {"size": 8}, RngState(6)).layers[0].albedo
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_validation_errors():
    with pytest.raises(ValueError):
        scene.preset_scene("edge", {"fg": 3000.0, "bg": 1000.0})
    with pytest.raises(ValueError):
        scene.preset_scene("flat", {"depth": 6000.0})
    with pytest.raises(ValueError):
        scene.preset_scene("teapot")
    with pytest.raises(ValueError):
        LayeredScene([])
    half = np.zeros((4, 4), np.float32)
    with pytest.raises(ValueError):
        LayeredScene([Layer(1000.0, half, half)])
    with pytest.raises(ValueError):
        scene.render_lightfield(_edge(), 4, 4)
    with pytest.raises(ValueError):
        LightField(np.zeros((2, 3, 4, 4)), np.zeros((2, 3, 4, 4)), 1.0, 1.0)


def test_save_load_roundtrip(tmp_path):
    lf = scene.render_lightfield(_edge(), 5, 5)
    paths = scene.save_lightfield(lf, tmp_path / "s")
    assert all(p.endswith(ext) for p, ext in zip(paths, (".amp.tns", ".dep.tns", ".meta")))
    back = scene.load_lightfield(tmp_path / "s")
    assert np.array_equal(back.amplitude, lf.amplitude)
    assert np.array_equal(back.view_depth, lf.view_depth)
    assert (back.baseline, back.focus_depth_mm, back.layer_depths_mm) == \
        (lf.baseline, lf.focus_depth_mm, lf.layer_depths_mm)


def test_crop():
    lf = scene.render_lightfield(_edge(), 3, 3)
    sub = lf.crop(2, 3, 8, 10)
    assert sub.amplitude.shape == (3, 3, 8, 10)
    assert np.array_equal(sub.view_depth, lf.view_depth[:, :, 2:10, 3:13])


def test_scene_suite_split():
    train, test = scene.scene_suite(0, size=16, views=3, count=8)
    assert len(train) == 6 and len(test) == 2
    assert all(len(lf.layer_depths_mm) == 2 for lf in test)
    again, _ = scene.scene_suite(0, size=16, views=3, count=8)
    assert all(np.array_equal(a.amplitude, b.amplitude) for a, b in zip(train, again))
