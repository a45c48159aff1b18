import json
import os

import numpy as np
import pytest
from PIL import Image

from evseg.affine import FlowField, load_flow, save_flow
from evseg.cli import flow_to_rgb, main
from evseg.events import EventSlice, SensorGeometry, load_mask, save_events, save_mask
from evseg.voxel import build_voxel_grid, load_voxel_grid

SMALL = {"preset": "two_layer", "size": 32, "sprite_size": 8, "background_shift": [3, 0], "sprite_shift": [-4, 0]}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = root / "scene.json"
    cfg.write_text(json.dumps({"sequences": [dict(SMALL, name="a"), dict(SMALL, name="b", seed=7)]}))
    assert main(["simulate", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root


def test_simulate(dataset, tmp_path, capsys):
    man = json.loads((dataset / "data" / "manifest.json").read_text())
    assert [e["name"] for e in man["sequences"]] == ["a", "b"]
    assert main(["simulate", "--config", str(dataset / "scene.json"), "--out", str(tmp_path / "again")]) == 0
    assert capsys.readouterr().out.strip() == str(tmp_path / "again" / "manifest.json")
    for name in ("a", "b"):
        assert ((dataset / "data" / name / "events.bin").read_bytes()
                == (tmp_path / "again" / name / "events.bin").read_bytes())


def test_simulate_config_errors(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"sequences": [{"preset": "custom", "width": 16, "height": 16,
                                              "background": {"image": "nope.png"}}]}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "sequences[0].background.image" in capsys.readouterr().err
    cfg.write_text(json.dumps({"sequences": [dict(SMALL, threshold=-1)]}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "sequences[0].threshold" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 1
    assert main(["simulate", "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_simulate_custom_scene(tmp_path):
    img = (np.arange(16 * 16).reshape(16, 16) % 200).astype(np.uint8)
    Image.fromarray(img).save(tmp_path / "bg.png")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"sequences": [{
        "preset": "custom", "width": 16, "height": 16, "background": {"image": "bg.png"},
        "background_motion": [2, 0, 0, 0, 0, 0],
        "sprites": [{"size": 4, "position": [6, 6], "motion": [-4, 0, 0, 0, 0, 0]}]}]}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    m = load_mask(tmp_path / "d" / "seq_000" / "gt_mask.png")
    assert m.sum() == 16


def test_segment_and_eval(dataset, tmp_path, capsys):
    data = dataset / "data"
    out = tmp_path / "seg"
    rc = main(["segment", "--manifest", str(data / "manifest.json"), "--out", str(out), "--seeds", "3",
               "--iterations", "5", "--n-events", "50000"])
    assert rc == 0
    for name in ("a", "b"):
        d = out / name
        for fn in ("layer0.png", "layer1.png", "flow.f32", "trace.csv", "params.json"):
            assert (d / fn).exists()
        for s in range(3):
            assert (d / f"seed_{s}" / "params.json").exists()
        params = json.loads((d / "params.json").read_text())
        finals = [r["final_total"] for r in params["runs"]]
        assert params["final_loss"]["total"] == min(finals)
        assert len((d / "trace.csv").read_text().strip().splitlines()) == 1 + 6
    capsys.readouterr()
    assert main(["eval", str(out), str(data), "--out", str(tmp_path / "rep")]) == 0
    rep = json.loads((tmp_path / "rep" / "report.json").read_text())
    ious = [r["iou"] for r in rep["rows"]]
    assert rep["aggregate"]["mean_iou"] == pytest.approx(np.mean(ious))
    assert rep["aggregate"]["dr_normalization"] == "gt_box"
    rc = main(["eval", str(out), str(data), "--out", str(tmp_path / "rep2"), "--gt-mode", "flow_threshold",
               "--tau", "3.5", "--dr-normalization", "box_iou"])
    assert rc == 0


def test_eval_perfect_and_empty(dataset, tmp_path):
    data = dataset / "data"
    man = json.loads((data / "manifest.json").read_text())
    res = tmp_path / "res"
    for e in man["sequences"]:
        gt = load_mask(data / e["gt_mask"])
        os.makedirs(res / e["name"])
        save_mask(~gt, res / e["name"] / "layer0.png")
        save_mask(gt, res / e["name"] / "layer1.png")
    assert main(["eval", str(res), str(data), "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    assert all(r["iou"] == 1.0 and r["dr"] == 1 and r["foreground_layer"] == 1 for r in rep["rows"])
    z = np.zeros((32, 32), bool)
    for e in man["sequences"]:
        save_mask(z, res / e["name"] / "layer0.png")
        save_mask(z, res / e["name"] / "layer1.png")
    assert main(["eval", str(res), str(data), "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    assert all(r["iou"] == 0.0 for r in rep["rows"])
    os.makedirs(res / "zzz")
    save_mask(z, res / "zzz" / "layer0.png")
    assert main(["eval", str(res), str(data), "--out", str(tmp_path / "r")]) == 1
    assert main(["eval", str(res), str(data), "--out", str(tmp_path / "r"), "--gt-mode", "flow_threshold"]) == 1


def test_segment_single_file_and_errors(dataset, tmp_path):
    ev = dataset / "data" / "a" / "events.bin"
    assert main(["segment", str(ev), "--out", str(tmp_path / "one"), "--seeds", "1", "--iterations", "3"]) == 0
    assert not (tmp_path / "one" / "seed_0").exists()
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"fit": {"learning_rate": -1}}))
    assert main(["segment", str(ev), "--out", str(tmp_path / "x"), "--config", str(cfg)]) == 1
    assert main(["segment", "--out", str(tmp_path / "x")]) == 1
    assert main(["segment", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "x")]) == 2
    g = SensorGeometry(8, 8)
    empty = tmp_path / "empty.bin"
    save_events(EventSlice(g, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64),
                           np.zeros(0, np.int8)), empty)
    assert main(["segment", str(empty), "--out", str(tmp_path / "x")]) == 2
    assert main(["frobnicate"]) == 1


def test_deblur(dataset, tmp_path):
    ev = dataset / "data" / "a" / "events.bin"
    zero = tmp_path / "zero.f32"
    save_flow(FlowField.zeros(SensorGeometry(32, 32)), zero)
    assert main(["deblur", str(ev), "--flow", str(zero), "--out", str(tmp_path / "z")]) == 0
    assert (tmp_path / "z" / "before.png").read_bytes() == (tmp_path / "z" / "after.png").read_bytes()

    # true background flow over the normalized window on a pure translation scene
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"sequences": [{"preset": "custom", "width": 48, "height": 48,
                                              "background": {}, "background_motion": [5, 0, 0, 0, 0, 0]}]}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "tr")]) == 0
    tev = tmp_path / "tr" / "seq_000" / "events.bin"
    gt = load_flow(tmp_path / "tr" / "seq_000" / "gt_flow.f32")
    assert main(["deblur", str(tev), "--flow", str(tmp_path / "tr" / "seq_000" / "gt_flow.f32"),
                 "--out", str(tmp_path / "d")]) == 0
    stats = json.loads((tmp_path / "d" / "deblur.json").read_text())
    assert stats["nonzero_after"] < stats["nonzero_before"]
    assert np.all(gt.u == 5)

    assert main(["deblur", str(ev), "--flow", str(tmp_path / "missing.f32"), "--out", str(tmp_path / "m")]) == 1
    assert main(["deblur", str(tev), "--flow", str(zero), "--out", str(tmp_path / "m")]) == 1
    assert main(["deblur", str(ev), "--iterations", "3", "--out", str(tmp_path / "fit")]) == 0


def test_voxelize(tmp_path):
    g = SensorGeometry(4, 3)
    s = EventSlice(g, np.array([0, 100]), np.array([1, 2]), np.array([0, 2]), np.array([1, -1], np.int8))
    save_events(s, tmp_path / "e.csv")
    assert main(["voxelize", str(tmp_path / "e.csv"), "--bins", "5", "--out", str(tmp_path / "v.f32")]) == 0
    v = load_voxel_grid(tmp_path / "v.f32")
    assert np.array_equal(v.values, build_voxel_grid(s, 5).values)
    assert v.values[0, 0, 1] == 1 and v.values[4, 2, 2] == -1 and np.count_nonzero(v.values) == 2
    assert main(["voxelize", str(tmp_path / "e.csv"), "--bins", "1", "--out", str(tmp_path / "v1.f32")]) == 0
    v1 = load_voxel_grid(tmp_path / "v1.f32")
    count = np.zeros((3, 4))
    count[0, 1], count[2, 2] = 1, -1
    assert np.array_equal(v1.values[0], count)
    (tmp_path / "empty.csv").write_text("# geometry 4 3\nt,x,y,p\n")
    assert main(["voxelize", str(tmp_path / "empty.csv"), "--out", str(tmp_path / "x.f32")]) == 1


def test_render_flow(tmp_path):
    g = SensorGeometry(6, 4)
    save_flow(FlowField.zeros(g), tmp_path / "z.f32")
    assert main(["render-flow", str(tmp_path / "z.f32"), "--out", str(tmp_path / "z.png")]) == 0
    img = np.asarray(Image.open(tmp_path / "z.png"))
    assert img.shape == (4, 6, 3) and np.all(img == 255)

    u = np.full((4, 6), 2.0)
    rgb = flow_to_rgb(FlowField(g, u, np.zeros((4, 6))))
    assert np.all(rgb == rgb[0, 0]) and len(set(rgb[0, 0])) > 1
    u[:, 3:] = -2.0
    rgb = flow_to_rgb(FlowField(g, u, np.zeros((4, 6)))).astype(int)
    assert np.array_equal(rgb[0, 0] + rgb[0, 5], [255, 255, 255])   # red + cyan

    (tmp_path / "bad.f32").write_bytes(b"junk")
    assert main(["render-flow", str(tmp_path / "bad.f32"), "--out", str(tmp_path / "b.png")]) == 1
    assert main(["render-flow", str(tmp_path / "nope.f32"), "--out", str(tmp_path / "b.png")]) == 1
