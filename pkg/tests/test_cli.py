import logging
import subprocess
import sys

import numpy as np
import pytest

from tofmask import cli
from tofmask.reconstruction import read_ply
from tofmask.scene import central_depth, load_lightfield
from tofmask.tensor import tns_read, tns_write


def run(*argv):
    return cli.main([str(a) for a in argv])


def manifest(path):
    out = {}
    for line in open(path):
        key, _, val = line.partition(" = ")
        out[key] = val.rstrip("\n")
    return out


def outputs(path):
    return {k: v for k, v in manifest(path).items() if k.startswith("output:")}


@pytest.fixture
def edge(tmp_path):
    stem = tmp_path / "s1"
    assert run("scene", "--preset", "edge", "--fg", 1000, "--bg", 3000, "--size", 16,
               "--views", 9, "--seed", 1, "--out", stem) == 0
    return str(stem)


def test_scene_writes_three_files(tmp_path):
    stem = tmp_path / "s1"
    assert run("scene", "--preset", "edge", "--fg", 1000, "--bg", 3000, "--size", 64,
               "--views", 9, "--seed", 1, "--out", stem) == 0
    for ext in (".amp.tns", ".dep.tns", ".meta", ".manifest"):
        assert (tmp_path / f"s1{ext}").exists()
    lf = load_lightfield(str(stem))
    assert (lf.U, lf.V, lf.H, lf.W) == (9, 9, 64, 64)


def test_scene_usage_errors(tmp_path, capsys):
    assert run("scene", "--preset", "edge", "--seed", 1) == cli.USAGE_ERROR
    assert "--out" in capsys.readouterr().err
    assert run("scene", "--preset", "cube", "--seed", 1, "--out", tmp_path / "x") == cli.USAGE_ERROR
    assert run("frobnicate") == cli.USAGE_ERROR


def test_scene_deterministic(tmp_path):
    for name in ("a", "b"):
        run("scene", "--preset", "bars", "--size", 16, "--views", 5, "--seed", 4,
            "--out", tmp_path / name)
    ha, hb = outputs(tmp_path / "a.manifest"), outputs(tmp_path / "b.manifest")
    assert sorted(ha.values()) == sorted(hb.values())


def test_simulate_identity_on_flat(tmp_path):
    stem = tmp_path / "flat"
    run("scene", "--preset", "flat", "--depth", 2000, "--size", 16, "--views", 5, "--seed", 0,
        "--out", stem)
    assert run("simulate", "--scene", stem, "--mask-pattern", "ones", "--noise", "off",
               "--seed", 0, "--crop", 8, "--patch-size", 10, "--out", tmp_path / "sim") == 0
    depth = tns_read(tmp_path / "sim.depth.tns")
    gt = central_depth(load_lightfield(str(stem)))
    np.testing.assert_allclose(depth, gt, rtol=1e-6)
    assert tns_read(tmp_path / "sim.corr.tns").shape == (4, 16, 16)
    assert any(k.startswith("input:") for k in manifest(tmp_path / "sim.manifest"))


def test_simulate_logs_circle_throughput(edge, tmp_path, caplog):
    with caplog.at_level(logging.INFO, logger="tofmask"):
        assert run("simulate", "--scene", edge, "--mask-pattern", "circle:5", "--seed", 0,
                   "--crop", 8, "--out", tmp_path / "sim") == 0
    assert "13/81" in caplog.text


def test_simulate_rejects_mismatched_mask(edge, tmp_path):
    tns_write(np.ones((5, 5, 8, 8), np.float32), tmp_path / "m.tns")
    assert run("simulate", "--scene", edge, "--mask", tmp_path / "m.tns", "--seed", 0,
               "--crop", 8, "--out", tmp_path / "sim") == cli.RUNTIME_ERROR
    assert run("simulate", "--scene", tmp_path / "nope", "--mask-pattern", "ones",
               "--seed", 0, "--out", tmp_path / "sim") == cli.RUNTIME_ERROR


def test_simulate_with_weights(tmp_path):
    stem = tmp_path / "flat"
    run("scene", "--preset", "flat", "--size", 16, "--views", 3, "--seed", 0, "--out", stem)
    run("optimize", "--scenes", stem, "--out", tmp_path / "run", "--seed", 0, "--epochs", 1,
        "--steps", 1, "--batch", 1, "--train-patch", 8, "--crop", 8, "--patch-size", 8,
        "--hidden", 4, "--layers", 2)
    assert run("simulate", "--scene", stem, "--mask-pattern", "ones", "--seed", 0, "--crop", 8,
               "--weights", tmp_path / "run" / "weights.tnsc", "--out", tmp_path / "sim") == 0
    assert tns_read(tmp_path / "sim.refined.tns").shape == (16, 16)


OPT = ("--epochs", 50, "--steps", 1, "--batch", 2, "--train-patch", 16, "--crop", 8,
       "--patch-size", 10, "--hidden", 4, "--layers", 2, "--mask-pattern", "circle:3")


def test_optimize_freeze_and_manifest(tmp_path):
    stems = []
    for i, preset in enumerate(("edge", "bars")):
        stems.append(tmp_path / preset)
        run("scene", "--preset", preset, "--size", 16, "--views", 5, "--seed", i, "--out", stems[-1])
    out = tmp_path / "run"
    assert run("optimize", "--scenes", *stems, "--out", out, "--seed", 3, *OPT) == 0
    mask = tns_read(out / "mask.tns")
    from tofmask.mask import init_mask
    np.testing.assert_array_equal(mask, init_mask("circle", {"diameter": 3}, None, 5, 5, 10))
    m = manifest(out / "manifest.txt")
    assert (m["lr_refiner"], m["lr_mask"]) == ("0.004", "0.1")
    assert (m["w_l"], m["w_c"], m["delta"]) == ("100.0", "0.08", "1.0")
    assert [m[k] for k in ("noise_a", "noise_b", "noise_mu", "noise_sigma")] == ["0.75", "1.25", "0.0", "3.0"]
    assert len(open(out / "log.csv").read().splitlines()) == 51

    # rerun from the manifest: identical artifacts
    again = tmp_path / "again"
    assert run("optimize", "--config", out / "manifest.txt", "--out", again) == 0
    assert sorted(outputs(again / "manifest.txt").values()) == sorted(outputs(out / "manifest.txt").values())


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("preset = flat\nseed = 2\nsize = 12\nviews = 3\nout = %s\n" % (tmp_path / "f"))
    assert run("scene", "--config", cfg, "--size", 8) == 0
    lf = load_lightfield(str(tmp_path / "f"))
    assert (lf.U, lf.H) == (3, 8)
    m = manifest(tmp_path / "f.manifest")
    assert m["size"] == "8" and m["seed"] == "2"
    cfg.write_text("bogus = 1\n")
    assert run("scene", "--config", cfg, "--preset", "flat", "--seed", 0, "--out", tmp_path / "g") == cli.USAGE_ERROR


def test_evaluate_ground_truth_self_test(edge, tmp_path):
    gt = central_depth(load_lightfield(edge))
    tns_write(gt, tmp_path / "gt.tns")
    assert run("evaluate", "--scenes", edge, "--predictions", tmp_path / "gt.tns", "--seed", 0,
               "--out", tmp_path / "m.csv") == 0
    rows = open(tmp_path / "m.csv").read().splitlines()
    header = rows[0].split(",")
    for row in rows[1:]:
        vals = dict(zip(header, row.split(",")))
        for k in ("rmse", "mae", "thresh3", "thresh15", "fp_ratio", "chamfer"):
            assert float(vals[k]) == 0.0


def test_evaluate_fp_protocol_and_ordering(edge, tmp_path):
    out = tmp_path / "m.csv"
    assert run("evaluate", "--scenes", edge, "--mask-pattern", "ones", "--fp-protocol",
               "--seed", 0, "--crop", 8, "--out", out) == 0
    text = open(out).read()
    agg = [r for r in text.splitlines() if r.startswith("aggregate")][0].split(",")
    header = text.splitlines()[0].split(",")
    assert float(agg[header.index("fp_ratio")]) == 1.0

    out2 = tmp_path / "cmp.csv"
    assert run("evaluate", "--scenes", edge, "--mask-pattern", "circle:1", "--fp-protocol",
               "--compare", "ones=ones", "--seed", 0, "--crop", 8, "--out", out2) == 0
    rows = open(out2).read().splitlines()
    assert any(r.startswith("ones:aggregate") for r in rows)
    assert any(r.startswith("ones_reference:aggregate") for r in rows)
    assert rows[-1] == "fp_ordering,PASS"
    assert run("evaluate", "--scenes", edge, "--seed", 0, "--out", out2) == cli.USAGE_ERROR


def test_export_ply_and_pgm(tmp_path):
    tns_write(np.array([[1000.0, 1100.0], [1200.0, 1300.0]], np.float32), tmp_path / "d.tns")
    g = np.random.default_rng(0)
    tns_write(g.uniform(size=(3, 3, 4, 4)).astype(np.float32), tmp_path / "m.tns")
    assert run("export", "--depth", tmp_path / "d.tns", "--ply", tmp_path / "d.ply",
               "--mask", tmp_path / "m.tns", "--pgm", tmp_path / "m.pgm",
               "--tns", tmp_path / "b.tns") == 0
    text = (tmp_path / "d.ply").read_text()
    assert "element vertex 4" in text
    assert len(read_ply(tmp_path / "d.ply")) == 4
    raw = (tmp_path / "m.pgm").read_bytes()
    pixels = raw[raw.index(b"255\n") + 4:]
    assert set(pixels) <= {0, 255}
    assert set(np.unique(tns_read(tmp_path / "b.tns"))) <= {0.0, 1.0}
    assert run("export", "--depth", tmp_path / "d.tns") == cli.USAGE_ERROR


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "tofmask", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "tofmask" in res.stdout
