import csv

import numpy as np
import pytest

from artifact import anchors as anc
from artifact import cli
from artifact.harness import region_masks, toy_library_inputs
from artifact.imgstat import save_mask, save_pnm
from artifact.indicators import write_mask_manifest


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr()


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    for t, recipe in ((1, "mouth:blur:3"), (2, "eyes:texture:0.25")):
        assert cli.main(["gen", "--recipe", recipe, "--task-index", str(t), "--n-train", "4",
                         "--n-test", "3", "--image-size", "32", "--seed", "7", "--out", str(root / f"t{t}")]) == 0
    cfg = root / "train.cfg"
    cfg.write_text("epochs=1\nbatch=8\nn_warmup=1\n")
    return root


def test_gen_layout(datasets):
    d = datasets / "t1"
    assert (d / "masks.txt").exists() and (d / "masks" / "mouth.pgm").exists()
    rows = list(csv.reader(open(d / "train" / "labels.csv")))
    assert rows[0] == ["file", "y_bin", "blur", "color", "structure", "texture", "boundary"]
    assert len(rows) == 1 + 8
    assert all((d / "train" / r[0]).exists() for r in rows[1:])


def test_train_then_eval(datasets, tmp_path, capsys):
    out = tmp_path / "model"
    code, res = run(capsys, "train", datasets / "t1", datasets / "t2", "--config", datasets / "train.cfg",
                    "--seed", 3, "--gate", "0.1", "--out", out)
    assert code == 0, res.err
    lines = [l for l in res.out.splitlines() if l.startswith("after_task")]
    assert len(lines) == 3 and all(len(l.split("auc=")[1].split(".")[1]) == 6 for l in lines)
    for name in ("model.ckpt", "library.txt", "library.vec", "heads.bin", "auc.csv", "manifest.txt"):
        assert (out / name).exists()
    code, res = run(capsys, "eval", "--checkpoint", out / "model.ckpt", "--data", datasets / "t2",
                    "--library", out / "library.txt")
    assert code == 0 and res.out.startswith("auc=")
    auc = float(res.out.split("=")[1])
    want = [r for r in csv.reader(open(out / "auc.csv"))][-1][2]
    assert f"{auc:.6f}" == want


def test_extract(tmp_path, capsys):
    masks = region_masks(32)
    rel = {}
    for name, m in masks.items():
        save_mask(tmp_path / f"{name}.pgm", m)
        rel[name] = f"{name}.pgm"
    write_mask_manifest(tmp_path / "masks.txt", rel)
    rng = np.random.default_rng(0)
    paths = []
    for i in range(3):
        p = tmp_path / f"img{i}.ppm"
        save_pnm(p, rng.random((32, 32, 3)))
        paths.append(p)
    code, res = run(capsys, "extract", *paths, "--masks", tmp_path / "masks.txt", "--out", tmp_path / "ind.csv")
    assert code == 0, res.err
    rows = list(csv.reader(open(tmp_path / "ind.csv")))
    assert len(rows) == 1 + 3 * 18


def test_build_anchors(tmp_path, capsys):
    cands, sups, planted = toy_library_inputs(48, seed=1)
    anc.save_candidates(cands, tmp_path / "cands.txt")
    anc.save_supports(sups, tmp_path / "sup.txt")
    code, res = run(capsys, "build-anchors", "--candidates", tmp_path / "cands.txt",
                    "--supports", tmp_path / "sup.txt", "--out", tmp_path / "lib")
    assert code == 0, res.err
    lib = anc.load_library(tmp_path / "lib" / "library.txt")
    for ch, k in planted.items():
        assert lib[ch].pair.fake_text == cands[ch][k].fake_text


def test_errors_exit_nonzero(tmp_path, capsys):
    code, res = run(capsys, "eval", "--checkpoint", tmp_path / "missing.ckpt", "--data", tmp_path)
    assert code == 2 and res.err.startswith("error:")
    with pytest.raises(SystemExit):
        cli.main(["run", "--gate", "0.5", "--out", str(tmp_path)])
    with pytest.raises(SystemExit):
        cli.main(["run", "--seed", "-1", "--out", str(tmp_path)])
    with pytest.raises(SystemExit):
        cli.main(["gen", "--recipe", "mouth-blur", "--out", str(tmp_path)])


def test_invalid_recipe_channel(tmp_path, capsys):
    code, res = run(capsys, "gen", "--recipe", "jawline:blur:1", "--out", tmp_path / "x")
    assert code == 2 and "invalid recipe" in res.err
