import csv
import json
import os

import numpy as np
import pytest

from splatfit import wgt
from splatfit.cli import main


def write_cfg(path, scene=None, train=None):
    with open(path, "w") as fh:
        json.dump({"scene": scene or {}, "train": train or {}}, fh)
    return str(path)


SCENE = {"n_frames": 8, "height": 20, "width": 20, "n_vertices": 48,
         "schedule": [{"type": "occluder", "start": 3, "end": 5,
                       "strength": 0.5}]}
TRAIN = {"epochs": 2, "lr_main": 5e-3}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(tmp / "cfg.json", SCENE, TRAIN)
    data = str(tmp / "data")
    assert main(["synth", "--config", cfg, "--seed", "0", "--out", data]) == 0
    ckpt = str(tmp / "model.wgta")
    assert main(["fit", data, "--config", cfg, "--seed", "0",
                 "--out", ckpt]) == 0
    return {"tmp": tmp, "cfg": cfg, "data": data, "ckpt": ckpt}


def test_synth_writes_dataset_layout(workspace):
    data = workspace["data"]
    assert os.path.exists(os.path.join(data, "manifest.json"))
    assert os.path.exists(os.path.join(data, "frames", "0001.png"))
    assert os.path.exists(os.path.join(data, "clean", "0001.wgt"))
    assert os.path.exists(os.path.join(data, "poses.wgt"))
    assert os.path.exists(os.path.join(data, "camera.json"))


def test_fit_writes_checkpoint(workspace):
    tensors, meta = wgt.read_archive(workspace["ckpt"])
    assert meta["epoch"] == 2
    assert any(k.startswith("avatar0.") for k in tensors)
    assert any(k.startswith("dpd.") for k in tensors)


def test_render_png_and_wgt(workspace):
    tmp = workspace["tmp"]
    png = str(tmp / "f1.png")
    raw = str(tmp / "f1.wgt")
    args = [workspace["data"], "--checkpoint", workspace["ckpt"],
            "--frame", "1"]
    assert main(["render"] + args + ["--out", png]) == 0
    assert main(["render"] + args + ["--out", raw]) == 0
    assert wgt.read_tensor(raw).shape == (20, 20, 3)
    assert os.path.getsize(png) > 0


def test_render_with_bias_differs(workspace):
    tmp = workspace["tmp"]
    a, b = str(tmp / "free.wgt"), str(tmp / "biased.wgt")
    args = [workspace["data"], "--checkpoint", workspace["ckpt"],
            "--frame", "3"]
    assert main(["render"] + args + ["--out", a]) == 0
    assert main(["render"] + args + ["--with-bias", "--out", b]) == 0
    assert not np.array_equal(wgt.read_tensor(a), wgt.read_tensor(b))


def test_eval_emits_csv_and_masks(workspace):
    tmp = workspace["tmp"]
    out = str(tmp / "metrics.csv")
    masks = str(tmp / "masks")
    assert main(["eval", workspace["data"], "--checkpoint", workspace["ckpt"],
                 "--split", "test", "--dump-masks", masks,
                 "--out", out]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert rows and list(rows[0].keys()) == [
        "frame_index", "psnr", "ssim", "mean_W_hand", "mean_W_background",
        "omega"]
    assert len(os.listdir(masks)) == len(rows)


def test_ablate_table(workspace, tmp_path):
    out = str(tmp_path / "table.json")
    cfg = write_cfg(tmp_path / "fast.json", SCENE, {"epochs": 1,
                                                    "lr_main": 5e-3})
    assert main(["ablate", workspace["data"], "--config", cfg, "--seed", "0",
                 "--out", out]) == 0
    with open(out) as fh:
        table = json.load(fh)
    assert set(table) == {"baseline", "dpd", "full"}


def test_missing_dataset_is_exit_code_1(tmp_path):
    assert main(["fit", str(tmp_path / "nope"), "--out",
                 str(tmp_path / "x.wgta")]) == 1


def test_bad_config_is_exit_code_1(tmp_path):
    cfg = write_cfg(tmp_path / "bad.json",
                    {"n_frames": 4, "entities": 3, "n_vertices": 48})
    assert main(["synth", "--config", cfg, "--out",
                 str(tmp_path / "d")]) == 1


def test_divergent_fit_is_exit_code_2(workspace, tmp_path):
    cfg = write_cfg(tmp_path / "hot.json", SCENE,
                    {"epochs": 3, "lr_main": 1e12})
    code = main(["fit", workspace["data"], "--config", cfg,
                 "--out", str(tmp_path / "x.wgta")])
    assert code == 2


def test_gradcheck_smoke():
    assert main(["gradcheck", "--seed", "0"]) == 0
