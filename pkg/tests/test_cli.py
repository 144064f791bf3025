import json
from pathlib import Path

import numpy as np
import pytest

from lapar import net
from lapar.cli import main
from lapar.dictionary import load_dictionary
from lapar.imaging import load_image, save_image
from lapar.synthetic import synthetic_image

DATA = Path(__file__).parent / "data"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def models(tmp_path_factory):
    root = tmp_path_factory.mktemp("models")
    paths = {}
    for task, scale in (("sr", 2), ("denoise", 1), ("deblock", 1)):
        cfg = net.ModelConfig(channels=4, blocks=1, L=14, scale=scale, task=task)
        paths[task] = root / f"{task}.lpar"
        net.save(net.build_model(cfg, seed=4, base_coeffs=np.eye(14)[0]), paths[task])
    return paths


@pytest.fixture
def photo(tmp_path):
    p = tmp_path / "in.png"
    save_image(synthetic_image(2, 24, 3), p)
    return p


def test_build_dict_default_and_rerun(tmp_path, capsys):
    a, b = tmp_path / "a.ldic", tmp_path / "b.ldic"
    assert run("build-dict", "--out", a) == 0
    assert load_dictionary(a).L == 72
    assert run("build-dict", "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    side = json.loads((tmp_path / "a.ldic.resolved.json").read_text())
    assert side["command"] == "build-dict" and side["seed"] == 0
    assert "L=72" in capsys.readouterr().out


def test_build_dict_preset_random_and_png(tmp_path):
    assert run("build-dict", "--preset", "14", "--out", tmp_path / "p.ldic", "--export-png", tmp_path / "png") == 0
    assert load_dictionary(tmp_path / "p.ldic").L == 14
    assert len(list((tmp_path / "png").glob("*.png"))) >= 14
    assert run("build-dict", "--random", "10", "--out", tmp_path / "r.ldic") == 0
    assert load_dictionary(tmp_path / "r.ldic").L == 10


def test_report_orders_presets(tmp_path):
    out = tmp_path / "r.tsv"
    assert run("report", "--scales", "2", "3", "--out", out) == 0
    lines = out.read_text().splitlines()
    models = [ln.split("\t")[0] for ln in lines[1:]]
    assert models == ["LAPAR-A", "LAPAR-B", "LAPAR-C"] * 2
    params = [int(ln.split("\t")[2]) for ln in lines[1:4]]
    assert params[0] > params[1] > params[2]


def test_eval_ground_truth_against_itself(tmp_path):
    clean = tmp_path / "clean"
    clean.mkdir()
    for i in range(2):
        save_image(synthetic_image(i, 24, 3), clean / f"im{i}.png")
    out = tmp_path / "e.tsv"
    assert run("eval", "--set", clean, "--pred", clean, "--task", "denoise", "--out", out) == 0
    rows = [ln.split("\t") for ln in out.read_text().splitlines()[1:]]
    assert len(rows) == 2 and all(float(r[2]) == 100.0 for r in rows)


def test_eval_baseline_on_synthetic_set(tmp_path, models):
    out = tmp_path / "e.tsv"
    assert run("eval", "--model", models["sr"], "--synthetic", 2, "--size", 32, "--out", out) == 0
    methods = {ln.split("\t")[0] for ln in out.read_text().splitlines()[1:]}
    assert "bicubic" in methods and len(methods) == 2


@pytest.mark.parametrize("task,extra", [("sr", []), ("denoise", []), ("deblock", ["--quality", "30"])])
def test_restore_commands(tmp_path, models, photo, task, extra):
    outs = {}
    for path in ("pixelwise", "basisconv"):
        outs[path] = tmp_path / f"{path}.png"
        assert run(task, "--model", models[task], "--dict", "14", "--in", photo, "--out", outs[path],
                   "--path", path, *extra) == 0
    a, b = load_image(outs["pixelwise"]), load_image(outs["basisconv"])
    s = 2 if task == "sr" else 1
    assert (a.height, a.width) == (24 * s, 24 * s)
    diff = np.abs(a.pixels * 255 - b.pixels * 255).max()
    assert diff <= 1.0 + 1e-9
    again = tmp_path / "again.png"
    run(task, "--model", models[task], "--dict", "14", "--in", photo, "--out", again, *extra)
    assert again.read_bytes() == outs["basisconv"].read_bytes()


def test_deblock_accepts_jpeg_input(tmp_path, models):
    from PIL import Image as PILImage

    src = tmp_path / "in.jpg"
    px = (synthetic_image(3, 24, 3).pixels.transpose(1, 2, 0) * 255).round().astype(np.uint8)
    PILImage.fromarray(px).save(src, quality=20)
    out = tmp_path / "o.png"
    assert run("deblock", "--model", models["deblock"], "--dict", "14", "--in", src, "--out", out) == 0
    assert load_image(out).width == 24


def test_task_mismatch_is_an_error(tmp_path, models, photo, capsys):
    out = tmp_path / "o.png"
    assert run("denoise", "--model", models["sr"], "--dict", "14", "--in", photo, "--out", out) == 2
    assert "trained for 'sr'" in capsys.readouterr().err
    assert run("sr", "--model", models["sr"], "--dict", "14", "--in", photo, "--out", out, "--scale", "3") == 2
    assert list(tmp_path.iterdir()) == [photo]


def test_dictionary_mismatch_leaves_no_output(tmp_path, models, photo):
    out = tmp_path / "o.png"
    assert run("sr", "--model", models["sr"], "--dict", "72", "--in", photo, "--out", out) == 2
    assert not out.exists() and not (tmp_path / "o.png.resolved.json").exists()
    assert list(tmp_path.iterdir()) == [photo]


def test_missing_input_is_an_error(tmp_path, models):
    assert run("sr", "--model", models["sr"], "--dict", "14", "--in", tmp_path / "none.png",
               "--out", tmp_path / "o.png") == 2


def test_inspect(tmp_path, capsys, models):
    run("build-dict", "--preset", "24", "--out", tmp_path / "d.ldic")
    capsys.readouterr()
    assert run("inspect", tmp_path / "d.ldic") == 0
    assert "L=24" in capsys.readouterr().out
    assert run("inspect", models["sr"]) == 0
    assert "model parameters" in capsys.readouterr().out
    (tmp_path / "junk").write_bytes(b"nope")
    assert run("inspect", tmp_path / "junk") == 2


def test_ablate_small(tmp_path):
    out = tmp_path / "a.tsv"
    assert run("ablate", "--dicts", "14", "random:14", "--synthetic", 2, "--size", 24, "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("dictionary-name") and len(lines) == 3


def test_train_command_short_run(tmp_path, capsys):
    cfg = tmp_path / "t.yaml"
    cfg.write_text("model: {channels: 4, blocks: 1, L: 14, scale: 2}\nbatch_size: 2\npatch: 16\n"
                   "train_images: 2\nval_images: 1\nimage_size: 32\nval_every: 0\nckpt_every: 2\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "run", "--iters", 4) == 0
    assert (tmp_path / "run" / "final.lpar").exists()
    assert net.load(tmp_path / "run" / "final.lpar").config.scale == 2
    assert "validation" in capsys.readouterr().out
