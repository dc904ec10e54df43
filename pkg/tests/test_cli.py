import argparse
import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from hinet.cli import build_parser, main
from hinet.imaging import load_png, save_png
from hinet.lut import import_cube

DOCUMENTED = {
    ("harmonize",): ["--image", "--mask", "--weights", "--out", "--mode", "--max-batch", "--target"],
    ("video",): ["--frames", "--masks", "--weights", "--out", "--keyframe-interval"],
    ("train",): ["--config", "--data", "--out"],
    ("gradcheck",): ["--seed"],
    ("bench",): ["--image", "--weights", "--tiles"],
    ("lut", "export"): ["--weights", "--cube"],
    ("lut", "import"): ["--weights", "--cube"],
    ("metrics",): ["--a", "--b", "--mask"],
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def subparsers(parser, prefix=()):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for name, sp in action.choices.items():
                yield prefix + (name,), sp
                yield from subparsers(sp, prefix + (name,))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    img = rng.random((24, 32, 3))
    mask = np.zeros((24, 32))
    mask[6:18, 8:20] = 1.0
    save_png(img, d / "img.png")
    save_png(mask, d / "mask.png")
    save_png(np.zeros((24, 32)), d / "zero.png")
    assert main(["init", "--out", str(d / "w.bin"), "--seed", "0"]) == 0
    return d


# ------------------------------------------------------------------ help

@pytest.mark.parametrize("path", sorted(DOCUMENTED))
def test_help_lists_documented_flags(path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(list(path) + ["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in DOCUMENTED[path]:
        assert flag in text


def test_help_round_trips_every_flag(capsys):
    for path, sp in subparsers(build_parser()):
        text = sp.format_help()
        for action in sp._actions:
            for opt in action.option_strings:
                assert opt in text, (path, opt)


def test_usage_errors_exit_2(workspace, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["harmonize", "--image", "x.png"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["harmonize", "--image", "a", "--weights", "b", "--out", "c", "--target", "12by4"])
    assert exc.value.code == 2
    code, _, err = run(capsys, "harmonize", "--image", workspace / "nope.png", "--mask", workspace / "mask.png",
                       "--weights", workspace / "w.bin", "--out", workspace / "o.png")
    assert code == 2 and "not found" in err
    code, _, _ = run(capsys, "harmonize", "--image", workspace / "img.png", "--mask", workspace / "mask.png",
                     "--weights", workspace / "w.bin", "--out", workspace / "o.png", "--max-batch", 64)
    assert code == 2
    code, _, _ = run(capsys, "metrics", "--a", workspace / "img.png", "--b", workspace / "img.png",
                     "--mask", workspace / "nope.png")
    assert code == 2


def test_runtime_error_exits_1(workspace, capsys):
    bad = workspace / "bad.bin"
    bad.write_bytes(b"not a weight file at all")
    code, _, err = run(capsys, "harmonize", "--image", workspace / "img.png", "--mask", workspace / "mask.png",
                       "--weights", bad, "--out", workspace / "o.png")
    assert code == 1 and err.startswith("hinet:")


# --------------------------------------------------------------- metrics

def test_metrics_identical(workspace, capsys):
    code, out, _ = run(capsys, "metrics", "--a", workspace / "img.png", "--b", workspace / "img.png")
    assert code == 0
    rep = json.loads(out)
    assert rep["mse"] == 0.0 and rep["psnr"] == 100.0


def test_metrics_with_mask(workspace, capsys):
    code, out, _ = run(capsys, "metrics", "--a", workspace / "img.png", "--b", workspace / "zero.png",
                       "--mask", workspace / "mask.png")
    assert code == 0
    assert json.loads(out)["fmse"] > 0


# ------------------------------------------------------------- harmonize

def test_zero_mask_output_identical_to_input(workspace, capsys):
    out = workspace / "same.png"
    code, _, _ = run(capsys, "harmonize", "--image", workspace / "img.png", "--mask", workspace / "zero.png",
                     "--weights", workspace / "w.bin", "--out", out)
    assert code == 0
    assert np.array_equal(load_png(out)[0], load_png(workspace / "img.png")[0])


@pytest.mark.parametrize("extra", [[], ["--mode", "tiled", "--max-batch", "128"], ["--mode", "region"],
                                   ["--mode", "lut-only"], ["--target", "40x30"]])
def test_harmonize_modes_byte_identical(workspace, capsys, extra):
    outs = []
    for k in range(2):
        out = workspace / f"h{k}.png"
        code, stdout, _ = run(capsys, "harmonize", "--image", workspace / "img.png", "--mask",
                              workspace / "mask.png", "--weights", workspace / "w.bin", "--out", out, *extra)
        assert code == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    rep = json.loads(stdout)
    assert (rep["height"], rep["width"]) == ((30, 40) if extra[:1] == ["--target"] else (24, 32))


def test_harmonize_uses_alpha_when_no_mask(workspace, capsys):
    from PIL import Image

    img = load_png(workspace / "img.png")[0]
    rgba = np.concatenate([np.round(img * 255), np.zeros((24, 32, 1))], axis=2).astype(np.uint8)
    Image.fromarray(rgba, mode="RGBA").save(workspace / "rgba.png")
    out = workspace / "alpha_out.png"
    code, _, _ = run(capsys, "harmonize", "--image", workspace / "rgba.png", "--weights", workspace / "w.bin",
                     "--out", out)
    assert code == 0
    assert np.array_equal(load_png(out)[0], img)
    code, _, err = run(capsys, "harmonize", "--image", workspace / "img.png", "--weights", workspace / "w.bin",
                       "--out", out)
    assert code == 2 and "alpha" in err


# ------------------------------------------------------------ other commands

def test_video(workspace, capsys):
    frames, masks = workspace / "frames", workspace / "masks"
    frames.mkdir()
    masks.mkdir()
    img = load_png(workspace / "img.png")[0]
    mask = load_png(workspace / "mask.png")[0][..., 0]
    for f in range(5):
        save_png(np.clip(img * (0.9 + 0.02 * f), 0, 1), frames / f"{f:03d}.png")
        save_png(mask, masks / f"{f:03d}.png")
    code, out, _ = run(capsys, "video", "--frames", frames, "--masks", masks, "--weights", workspace / "w.bin",
                       "--out", workspace / "vout", "--keyframe-interval", 2, "--targets", frames)
    assert code == 0
    rep = json.loads(out)
    assert [r["keyframe"] for r in rep["frames"]] == [True, False, True, False, True]
    assert "psnr" in rep["frames"][0]
    assert len(list((workspace / "vout").glob("*.png"))) == 5


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", 0)
    rep = json.loads(out)
    assert code == 0 and rep["passed"] and rep["max_rel_error"] < 1e-4


def test_bench(workspace, capsys):
    csv_path = workspace / "bench.csv"
    code, out, _ = run(capsys, "bench", "--image", workspace / "img.png", "--mask", workspace / "mask.png",
                       "--weights", workspace / "w.bin", "--tiles", "4,1", "--csv", csv_path)
    assert code == 0
    rows = json.loads(out)["rows"]
    assert [r["tiles"] for r in rows] == [1, 4]
    assert rows[1]["peak_transient_floats"] < rows[0]["peak_transient_floats"]
    assert len(list(csv.DictReader(csv_path.open()))) == 2


def test_lut_export_import_round_trip(workspace, capsys):
    cube = workspace / "x.cube"
    code, _, _ = run(capsys, "lut", "export", "--weights", workspace / "w.bin", "--cube", cube,
                     "--image", workspace / "img.png", "--mask", workspace / "mask.png")
    assert code == 0
    lut = import_cube(cube)
    code, _, _ = run(capsys, "lut", "import", "--weights", workspace / "w.bin", "--cube", cube,
                     "--out", workspace / "w_lut.bin")
    assert code == 0
    again = workspace / "y.cube"
    run(capsys, "lut", "export", "--weights", workspace / "w_lut.bin", "--cube", again,
        "--image", workspace / "zero.png", "--mask", workspace / "zero.png")
    # the imported LUT is constant, whatever the input
    assert np.max(np.abs(import_cube(again).lattice - lut.lattice)) <= 1e-6


def test_train_overfit_and_progressive(workspace, capsys):
    data = workspace / "data"
    code, _, _ = run(capsys, "synth", "--out", data, "--count", 1, "--size", 32)
    assert code == 0
    cfg = workspace / "train.json"
    cfg.write_text(json.dumps({"steps": 3, "eval_every": 2, "seed": 1}))
    blobs = []
    for k in range(2):
        code, out, _ = run(capsys, "train", "--config", cfg, "--data", data, "--out", workspace / f"t{k}.bin",
                           "--trace", workspace / f"t{k}.csv")
        assert code == 0
        blobs.append((workspace / f"t{k}.bin").read_bytes())
    assert blobs[0] == blobs[1]
    rows = list(csv.DictReader((workspace / "t0.csv").open()))
    assert len(rows) == 3 and rows[1]["psnr"] != ""
    cfg.write_text(json.dumps({"mode": "progressive", "phase1_epochs": 1, "phase2_epochs": 1, "lr_size": 16,
                               "crop_size": 16}))
    code, out, _ = run(capsys, "train", "--config", cfg, "--data", data, "--out", workspace / "p.bin")
    assert code == 0 and json.loads(out)["steps"] == 2
    cfg.write_text(json.dumps({"stepz": 3}))
    code, _, err = run(capsys, "train", "--config", cfg, "--data", data, "--out", workspace / "p.bin")
    assert code == 2 and "stepz" in err


def test_console_script_entry_point(workspace):
    res = subprocess.run([sys.executable, "-m", "hinet.cli", "metrics", "--a", str(workspace / "img.png"),
                          "--b", str(workspace / "img.png")], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["psnr"] == 100.0
