import hashlib

import numpy as np
import pytest
from PIL import Image

from ccgan import gradcheck
from ccgan.cli import main
from ccgan.core import ExperimentConfig
from ccgan.data import load_manifest
from ccgan.evaluation import parse_report
from ccgan.networks import build_bundle, save_checkpoint
from ccgan.training import latest_checkpoint, read_metrics

TINY_SETS = [
    "--set", "generator_filters=8",
    "--set", "discriminator_filters=8",
    "--set", "residual_blocks=1",
    "--set", "pho_resolution=16",
]


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_default_size_and_repeatability(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "a")]) == 0
    assert capsys.readouterr().out.strip().endswith("manifest.tsv")
    assert main(["synth", "--out", str(tmp_path / "b")]) == 0
    m = load_manifest(tmp_path / "a" / "manifest.tsv")
    assert len(m.entries) == 120 and m.patch_size == 64
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_synth_requires_out(capsys):
    with pytest.raises(SystemExit) as info:
        main(["synth"])
    assert info.value.code == 2
    assert "--out" in capsys.readouterr().err


def test_synth_rejects_too_many_classes(tmp_path, capsys):
    assert main(["synth", "--classes", "9", "--out", str(tmp_path)]) == 2
    assert "--classes" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_fixture):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--manifest", str(small_fixture), "--out", str(out), "--iterations", "4", "--checkpoint-every", "2", *TINY_SETS])
    assert code == 0
    return out


def test_train_writes_checkpoint_and_metrics(trained):
    assert [p.name for p in sorted((trained / "checkpoints").glob("*.pt"))] == ["iter_0000002.pt", "iter_0000004.pt"]
    rows = read_metrics(trained / "metrics.tsv")
    assert [r["iteration"] for r in rows] == [1, 2, 3, 4]


def test_train_resume_extends_run(tmp_path, small_fixture):
    args = ["train", "--manifest", str(small_fixture), "--out", str(tmp_path), "--checkpoint-every", "2", *TINY_SETS]
    assert main([*args, "--iterations", "2"]) == 0
    assert main([*args, "--iterations", "4", "--resume"]) == 0
    assert [r["iteration"] for r in read_metrics(tmp_path / "metrics.tsv")] == [1, 2, 3, 4]


def test_train_unknown_key_exits_2(tmp_path, small_fixture, capsys):
    code = main(["train", "--manifest", str(small_fixture), "--out", str(tmp_path), "--set", "lamda_cyc=3"])
    assert code == 2
    assert "lamda_cyc" in capsys.readouterr().err


def test_train_yaml_config(tmp_path, small_fixture):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("total_iterations: 1\ncheckpoint_every: 1\ngenerator_filters: 8\ndiscriminator_filters: 8\nresidual_blocks: 1\npho_resolution: 16\n")
    assert main(["train", "--config", str(cfg), "--manifest", str(small_fixture), "--out", str(tmp_path / "run")]) == 0
    assert len(read_metrics(tmp_path / "run" / "metrics.tsv")) == 1


def test_resume_without_checkpoint_is_explicit(tmp_path, small_fixture, capsys):
    code = main(["train", "--manifest", str(small_fixture), "--out", str(tmp_path), "--resume", *TINY_SETS])
    assert code != 0
    assert "checkpoint" in capsys.readouterr().err.lower()


def _latest(run):
    return latest_checkpoint(run)


def _write_png(path, size, seed=0):
    arr = np.random.default_rng(seed).integers(0, 256, (size, size, 3), dtype=np.uint8)
    Image.fromarray(arr).save(path)


def test_translate_patch_sized(trained, tmp_path):
    src, dst = tmp_path / "in.png", tmp_path / "out.png"
    _write_png(src, 32)
    assert main(["translate", "--checkpoint", str(_latest(trained)), "--input", str(src), "--output", str(dst)]) == 0
    with Image.open(dst) as im:
        assert im.size == (32, 32) and im.mode == "RGB"


def test_translate_explicit_class_and_tiling(trained, tmp_path):
    src = tmp_path / "big.png"
    _write_png(src, 80, seed=1)
    ck = str(_latest(trained))
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    assert main(["translate", "--checkpoint", ck, "--input", str(src), "--output", str(a), "--class", "F", "--tile", "32", "--overlap", "8"]) == 0
    assert main(["translate", "--checkpoint", ck, "--input", str(src), "--output", str(b), "--tile", "32", "--overlap", "8"]) == 0
    for p in (a, b):
        with Image.open(p) as im:
            assert im.size == (80, 80)


def test_translate_rejects_class_outside_model(trained, tmp_path, capsys):
    src = tmp_path / "in.png"
    _write_png(src, 32)
    code = main(["translate", "--checkpoint", str(_latest(trained)), "--input", str(src), "--output", str(tmp_path / "o.png"), "--class", "BG"])
    assert code == 2
    assert "BG" in capsys.readouterr().err


def test_translate_missing_checkpoint(tmp_path, capsys):
    code = main(["translate", "--checkpoint", str(tmp_path / "none.pt"), "--input", "x.png", "--output", "y.png"])
    assert code == 1
    assert "not found" in capsys.readouterr().err


@pytest.fixture(scope="module")
def eight_class_ckpt(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval8")
    assert main(["synth", "--classes", "8", "--size", "32", "--per-class", "30", "--seed", "5", "--out", str(root / "data")]) == 0
    cfg = ExperimentConfig(patch_size=32, num_classes=8, generator_filters=8, discriminator_filters=8, residual_blocks=1)
    ck = save_checkpoint(root / "model.pt", build_bundle(cfg), cfg, 0)
    return ck, root / "data" / "manifest.tsv"


def test_evaluate_defaults(eight_class_ckpt, capsys):
    ck, manifest = eight_class_ckpt
    assert main(["evaluate", "--checkpoint", str(ck), "--manifest", str(manifest)]) == 0
    out = capsys.readouterr().out
    report_path = ck.with_name("model_report_X_to_Y.tsv")
    assert report_path.read_text() in out
    parsed = parse_report(report_path.read_text())
    assert parsed["n_patches"]["Overall"] == 240
    assert list(parsed["n_patches"]) == ["H", "TF", "N", "F", "HF", "TN", "HB", "BG", "Overall"]


def test_evaluate_markdown_and_output(eight_class_ckpt, tmp_path):
    ck, manifest = eight_class_ckpt
    dst = tmp_path / "r.md"
    args = ["evaluate", "--checkpoint", str(ck), "--manifest", str(manifest), "--format", "markdown", "--n-per-class", "3", "--output", str(dst), "--direction", "Y_to_X"]
    assert main(args) == 0
    assert dst.read_text().startswith("| Metric |")
    assert parse_report(dst.read_text())["n_patches"]["Overall"] == 24


def test_evaluate_deficit(eight_class_ckpt, capsys):
    ck, manifest = eight_class_ckpt
    assert main(["evaluate", "--checkpoint", str(ck), "--manifest", str(manifest), "--n-per-class", "31"]) == 1
    assert "30/31" in capsys.readouterr().err


def test_gradcheck_passes_and_is_deterministic(capsys):
    assert main(["gradcheck", "--size", "8", "--seed", "1"]) == 0
    first = capsys.readouterr().out
    assert first.splitlines()[-1] == "OK: 5/5 checks passed"
    assert main(["gradcheck", "--size", "8", "--seed", "1"]) == 0
    assert capsys.readouterr().out == first


def test_gradcheck_catches_sign_flip(capsys):
    with gradcheck.fault_injection({"ssim": lambda g: -g}):
        assert main(["gradcheck"]) == 1
    out = capsys.readouterr().out
    assert "FAIL\tssim" in out and out.splitlines()[-1].startswith("FAILED")


def test_help_documents_defaults(capsys):
    with pytest.raises(SystemExit) as info:
        main(["evaluate", "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    assert "default: 30" in text and "default: X_to_Y" in text
