import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tofmask import mask as mk
from tofmask.tensor import RngState


def test_circle_counts():
    assert mk.init_mask("circle", {"diameter": 5}, P=4)[:, :, 0, 0].sum() == 13
    pin = mk.init_mask("circle", {"diameter": 1}, P=4)
    assert pin[:, :, 2, 1].sum() == 1 and pin[4, 4].min() == 1
    assert mk.throughput(mk.init_mask("circle", {"diameter": 5}, P=4)) == pytest.approx(13 / 81)
    assert mk.throughput(mk.init_mask("ones", P=4)) == 1.0
    with pytest.raises(ValueError):
        mk.init_mask("circle", {"diameter": 11})


def test_random_patterns():
    b = mk.init_mask("bernoulli", {"p": 0.3}, RngState(1), P=20)
    assert set(np.unique(b)) <= {0.0, 1.0} and abs(b.mean() - 0.3) < 0.02
    g = mk.init_mask("gaussian", {"std": 0.2}, RngState(1), P=20)
    assert g.min() >= 0 and g.max() <= 1 and abs(g.mean() - 0.5) < 0.02
    bc = mk.init_mask("barcode", {"period": 4}, RngState(1), P=6)
    assert set(np.unique(bc)) <= {0.0, 1.0}
    with pytest.raises(ValueError):
        mk.init_mask("bernoulli", {"p": 2})
    with pytest.raises(ValueError):
        mk.init_mask("stripes")


def test_parse_pattern():
    assert mk.parse_pattern("circle:5") == ("circle", {"diameter": 5.0})
    assert mk.parse_pattern("ones") == ("ones", {})
    with pytest.raises(ValueError):
        mk.parse_pattern("ones:3")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 3), st.integers(1, 13), st.integers(1, 13),
       st.integers(0, 20), st.integers(0, 20))
def test_tiling_index(K, extra, H, W, orow, ocol):
    P = K + extra
    patch = np.random.default_rng(K * 100 + P).random((3, 3, P, P)).astype(np.float32)
    arr = np.asarray(mk.tile_mask(patch, H, W, K, (orow, ocol)).array())
    c0 = (P - K) // 2
    for x in range(H):
        for y in range(W):
            assert np.array_equal(arr[:, :, x, y], patch[:, :, c0 + (x + orow) % K, c0 + (y + ocol) % K])


def test_tile_rejects_large_crop():
    with pytest.raises(ValueError):
        mk.tile_mask(np.ones((3, 3, 4, 4)), 8, 8, K=5)


def test_project_and_binarize():
    p = np.array([-0.5, 0.2, 0.5, 1.7], np.float32).reshape(1, 1, 2, 2)
    assert mk.project_box(p).ravel().tolist() == [0.0, pytest.approx(0.2), 0.5, 1.0]
    b, rep = mk.binarize(np.array([0.2, 0.5, 0.9, 0.4]).reshape(1, 1, 2, 2))
    assert b.ravel().tolist() == [0, 1, 1, 0]
    assert rep["throughput_after"] == 0.5
    with pytest.raises(ValueError):
        mk.binarize(p, 1.0)


def test_mosaic_layout():
    patch = np.arange(3 * 3 * 2 * 2).reshape(3, 3, 2, 2)
    img = mk.mosaic(patch)
    assert img.shape == (6, 6)
    for i in range(2):
        for j in range(2):
            assert np.array_equal(img[i * 3:(i + 1) * 3, j * 3:(j + 1) * 3], patch[:, :, i, j])
    assert np.array_equal(mk.unmosaic(img, 3, 3), patch)


def test_pgm_bytes_and_comment(tmp_path):
    patch = mk.init_mask("circle", {"diameter": 3}, P=2)
    mk.write_pgm(tmp_path / "m.pgm", patch * 0.8)
    img, meta = mk.read_pgm(tmp_path / "m.pgm")
    assert set(np.unique(img)) == {0, 255}
    assert meta["U"] == "9" and meta["P"] == "2"
    assert img.shape == (18, 18)
    assert np.array_equal(mk.read_pgm_patch(tmp_path / "m.pgm"), patch)
