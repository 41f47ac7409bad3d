#!/usr/bin/env python3
"""
Test the dynfusion command line: exit codes, outputs and config files
"""
import json
import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))
from fusion_net import FusionPipeline, PipelineSpec, save_params
from image_core import Image, load_image, save_image
from pipeline_cli import (
    EXIT_EMPTY,
    EXIT_INCOMPATIBLE,
    EXIT_OK,
    EXIT_USAGE,
    UsageError,
    main,
    parse_args,
    parse_dims,
)


def _write_random(path, width=64, height=48, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    save_image(Image.from_array(rng.random((height, width, 3)) * scale), path)
    return str(path)


def _tree(root):
    return {
        str(path.relative_to(root)): path.read_bytes()
        for path in sorted(root.rglob("*"))
        if path.is_file()
    }


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    code = main(["-q", "build-dataset", "--synthetic", "3", "--dims", "32x24",
                 "--split", "0.67", "-o", str(out)])
    assert code == EXIT_OK
    return out


@pytest.fixture(scope="module")
def basic2_checkpoint(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["-q", "train", "--dataset", str(small_dataset), "--mode", "basic2",
                 "--max-iters", "2", "--batch-size", "2", "-o", str(out)])
    assert code == EXIT_OK
    return out / "final.lefn"


def test_parse_dims():
    assert parse_dims("128x96") == (128, 96)
    assert parse_dims("800X480") == (800, 480)


def test_fuse_needs_two_inputs(tmp_path):
    single = _write_random(tmp_path / "a.png")
    assert main(["-q", "fuse", single, "-o", str(tmp_path / "out.png")]) == EXIT_USAGE


def test_fuse_identical_images(tmp_path):
    a = _write_random(tmp_path / "a.png", seed=1)
    out = tmp_path / "fused.png"
    assert main(["-q", "fuse", a, a, "-o", str(out)]) == EXIT_OK
    assert np.max(np.abs(load_image(out).data - load_image(a).data)) <= 1 / 255 + 1e-6


def test_fuse_unreadable_input(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"nope")
    good = _write_random(tmp_path / "good.png")
    out = str(tmp_path / "o.png")
    assert main(["-q", "fuse", good, str(bad), "-o", out]) == EXIT_USAGE
    missing = str(tmp_path / "missing.png")
    assert main(["-q", "fuse", good, missing, "-o", out]) == EXIT_USAGE


def test_build_synthetic_counts(tmp_path):
    out = tmp_path / "ds"
    assert main(["-q", "build-dataset", "--synthetic", "10", "--dims", "32x24",
                 "-o", str(out)]) == EXIT_OK
    index = json.loads((out / "index.json").read_text())
    assert sum(index["counts"].values()) == 40
    assert len(index["samples"]) == 40


def test_build_with_no_admissible_pairs(tmp_path):
    code = main(["-q", "build-dataset", "--synthetic", "2", "--dims", "32x24",
                 "--exposure-ratio", "4", "-o", str(tmp_path / "empty")])
    assert code == EXIT_EMPTY


def test_build_is_reproducible(tmp_path):
    args = ["-q", "build-dataset", "--synthetic", "2", "--dims", "32x24", "--seed", "5"]
    assert main(args + ["-o", str(tmp_path / "one")]) == EXIT_OK
    assert main(args + ["-o", str(tmp_path / "two")]) == EXIT_OK
    assert _tree(tmp_path / "one") == _tree(tmp_path / "two")


def test_build_needs_a_source(tmp_path):
    assert main(["-q", "build-dataset", "-o", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["-q", "build-dataset", "--synthetic", "2"]) == EXIT_USAGE


def test_config_file_defaults_and_override(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"synthetic": 2, "dims": "16x16", "seed": 3}))
    args = parse_args(["build-dataset", "--config", str(config), "--dims", "32x24"])
    assert args.synthetic == 2
    assert args.seed == 3
    assert args.dims == (32, 24)

    out = tmp_path / "ds"
    assert main(["-q", "build-dataset", "--config", str(config), "--dims", "32x24",
                 "-o", str(out)]) == EXIT_OK
    first = json.loads((out / "index.json").read_text())["samples"][0]
    assert load_image(out / first["dir"] / "gt.png").dims == (32, 24)

    config.write_text(json.dumps({"no-such-flag": 1}))
    assert main(["-q", "build-dataset", "--config", str(config)]) == EXIT_USAGE


def test_train_writes_checkpoints(basic2_checkpoint):
    run = basic2_checkpoint.parent
    assert basic2_checkpoint.exists()
    assert (run / "train_log.jsonl").read_text().strip()


def test_infer_mode_mismatch(basic2_checkpoint, tmp_path):
    ref = _write_random(tmp_path / "ref.png", seed=2, scale=0.3)
    nonref = _write_random(tmp_path / "nonref.png", seed=3)
    code = main(["-q", "infer", "--checkpoint", str(basic2_checkpoint),
                 "--mode", "pipeline2", "--ref", ref, "--nonref", nonref,
                 "-o", str(tmp_path / "out.png")])
    assert code == EXIT_INCOMPATIBLE


def test_infer_basic2(basic2_checkpoint, tmp_path):
    ref = _write_random(tmp_path / "ref.png", seed=2, scale=0.3)
    nonref = _write_random(tmp_path / "nonref.png", seed=3)
    out = tmp_path / "out.png"
    code = main(["-q", "infer", "--checkpoint", str(basic2_checkpoint), "--ref", ref,
                 "--nonref", nonref, "-o", str(out), "--dump-intermediates"])
    assert code == EXIT_OK
    assert load_image(out).dims == (64, 48)
    assert (tmp_path / "out_merged.png").exists()


def test_infer_pipeline2_intermediates(tmp_path):
    checkpoint = tmp_path / "p2.lefn"
    save_params(FusionPipeline.initialize(PipelineSpec.pipeline2(), seed=1), checkpoint)
    ref = _write_random(tmp_path / "ref.png", seed=4, scale=0.3)
    nonref = _write_random(tmp_path / "nonref.png", seed=5)
    out = tmp_path / "fused.png"
    code = main(["-q", "infer", "--checkpoint", str(checkpoint), "--mode", "pipeline2",
                 "--ref", ref, "--nonref", nonref, "-o", str(out),
                 "--dump-intermediates"])
    assert code == EXIT_OK
    written = sorted(p.name for p in tmp_path.glob("fused*.png"))
    assert written == [
        "fused.png", "fused_cm_over.png", "fused_ghost.png", "fused_merged.png"
    ]

    code = main(["-q", "infer", "--checkpoint", str(checkpoint), "--ref", ref,
                 "-o", str(out)])
    assert code == EXIT_USAGE


def test_infer_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.lefn"
    bad.write_bytes(b"JUNKJUNKJUNK")
    ref = _write_random(tmp_path / "ref.png")
    code = main(["-q", "infer", "--checkpoint", str(bad), "--ref", ref, "--nonref", ref,
                 "-o", str(tmp_path / "o.png")])
    assert code == EXIT_INCOMPATIBLE


def test_eval_report_is_reproducible(basic2_checkpoint, small_dataset, tmp_path):
    reports = []
    for name in ("one.json", "two.json"):
        path = tmp_path / name
        code = main(["-q", "eval", "--checkpoint", str(basic2_checkpoint),
                     "--dataset", str(small_dataset), "--split", "val",
                     "--no-timing", "--report", str(path)])
        assert code == EXIT_OK
        reports.append(path.read_bytes())
    assert reports[0] == reports[1]
    report = json.loads(reports[0])
    assert report["mode"] == "basic2"
    assert len(report["samples"]) == 4
    assert report["mean_seconds"] is None


def test_output_paths_checked_up_front(tmp_path, capsys):
    missing_dir = tmp_path / "missing" / "out.png"
    with pytest.raises(UsageError):
        parse_args(["fuse", "a.png", "b.png", "-o", str(missing_dir)])
    with pytest.raises(UsageError):
        parse_args(["eval", "--report", str(missing_dir)])
    blocker = tmp_path / "taken"
    blocker.write_text("x")
    with pytest.raises(UsageError):
        parse_args(["train", "--out", str(blocker)])
    with pytest.raises(UsageError):
        parse_args(["infer", "-o", str(tmp_path)])
    # nested run directories are created on demand
    assert parse_args(["train", "--out", str(tmp_path / "runs" / "a")]).out

    a = _write_random(tmp_path / "a.png")
    assert main(["-q", "fuse", a, a, "-o", str(missing_dir)]) == EXIT_USAGE
    assert "does not exist" in capsys.readouterr().err
    assert not missing_dir.parent.exists()


def main_tests():
    """Run this module's tests"""
    return pytest.main([__file__, "-q"])


if __name__ == "__main__":
    sys.exit(main_tests())
