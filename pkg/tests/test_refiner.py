import numpy as np
import pytest

from tofmask import autodiff as ad
from tofmask import refiner as rf
from tofmask.autodiff import Tape
from tofmask.tensor import RngState


def _inputs(H=12, W=10, U=3, seed=0):
    g = np.random.default_rng(seed)
    return g.uniform(800, 3000, (H, W)), g.random((U, U, H, W))


def test_initial_network_is_identity():
    depth, mask = _inputs()
    w = rf.refine_init(rf.RefinerConfig(hidden_channels=4), RngState(0), views=9)
    np.testing.assert_array_equal(np.asarray(rf.refine_forward(depth, mask, w)), depth)


@pytest.mark.parametrize("layers,down", [(2, True), (3, True), (4, False), (5, True)])
def test_shapes_and_nonnegative_output(layers, down):
    depth, mask = _inputs(H=9, W=13)
    cfg = rf.RefinerConfig(hidden_channels=3, num_layers=layers, downsample=down)
    w = rf.refine_init(cfg, RngState(1), views=9)
    g = np.random.default_rng(2)
    w = rf.RefinerWeights([(k + g.normal(0, 0.5, k.shape), b + 5.0) for k, b in w.layers], cfg)
    out = np.asarray(rf.refine_forward(depth, mask, w))
    assert out.shape == depth.shape and out.min() >= 0
    assert cfg.encoder_decoder == (down and layers >= 3)


def test_parameter_count():
    w = rf.refine_init(rf.RefinerConfig(), RngState(0), views=81)
    n = 16 * 82 * 9 + 16 + 2 * (16 * 16 * 9 + 16) + 16 * 9 + 1
    assert w.num_parameters() == n
    assert w.in_channels == 82


def test_input_validation():
    w = rf.refine_init(rf.RefinerConfig(hidden_channels=2), RngState(0), views=9)
    depth, mask = _inputs(H=6, W=6)
    with pytest.raises(ValueError):
        rf.refine_forward(depth, mask, w)
    depth, mask = _inputs(U=5)
    with pytest.raises(ValueError):
        rf.refine_forward(depth, mask, w)
    depth, _ = _inputs()
    with pytest.raises(ValueError):
        rf.refine_forward(depth, np.ones((3, 3, 8, 8)), w)
    with pytest.raises(ValueError):
        rf.RefinerConfig(num_layers=1)


def test_weight_gradient_matches_finite_difference():
    depth, mask = _inputs(H=8, W=8)
    cfg = rf.RefinerConfig(hidden_channels=2, num_layers=3)
    w = rf.refine_init(cfg, RngState(3), views=9)
    g = np.random.default_rng(4)
    flat = [np.asarray(t, np.float64) + g.normal(0, 0.1, t.shape) for t in w.flat()]

    def loss(params):
        return float(np.sum(np.asarray(rf.refine_forward(depth, mask, w, params=params)) ** 2))

    tape = Tape()
    leaves = [tape.leaf(t) for t in flat]
    out = rf.refine_forward(depth, mask, w, params=leaves)
    grads = tape.backward(ad.sum(ad.mul(out, out)))
    for li, idx in [(4, (0, 1, 1, 1)), (5, (0,)), (2, (1, 0, 2, 0)), (0, (1, 3, 0, 2))]:
        hi = [t.copy() for t in flat]
        lo = [t.copy() for t in flat]
        hi[li][idx] += 1e-4
        lo[li][idx] -= 1e-4
        fd = (loss(hi) - loss(lo)) / 2e-4
        assert grads[leaves[li]][idx] == pytest.approx(fd, rel=1e-4, abs=1e-3)


def test_container_errors(tmp_path):
    w = rf.refine_init(rf.RefinerConfig(hidden_channels=2, num_layers=2), RngState(0), views=9)
    rf.write_weights(tmp_path / "w", w)
    blob = (tmp_path / "w").read_bytes()
    assert blob.startswith(b"TNSC1 4\nconfig ")
    (tmp_path / "bad").write_bytes(blob + b"x")
    with pytest.raises(ValueError):
        rf.read_weights(tmp_path / "bad")
    (tmp_path / "bad2").write_bytes(b"nope")
    with pytest.raises(ValueError):
        rf.read_weights(tmp_path / "bad2")
