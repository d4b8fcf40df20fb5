import os

import numpy as np
import pytest

from sucode.cli import dispatch
from sucode.data import load_image


def _read(path):
    with open(path) as fh:
        return fh.read()


@pytest.fixture
def toy_cfg_file(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(
        "class_count = 3\ncodebook_entries = 32\nembed_dim = 16\n"
        "image_size = 64\nepochs = 1\nbatch_size = 4\nseed = 5\n"
    )
    return str(path)


class TestSynthVerb:
    def test_writes_triplets(self, tmp_path):
        out = tmp_path / "data"
        code = dispatch(["synth", "--count", "4", "--out", str(out),
                         "--size", "64", "--classes", "3", "--seed", "2"])
        assert code == 0
        for sub in ("raw", "mask", "ref"):
            assert len(list((out / sub).glob("*.png"))) == 4
        assert (out / "manifest.txt").exists()

    def test_seed_reproducible_bytes(self, tmp_path):
        for name in ("a", "b"):
            assert dispatch(["synth", "--count", "2", "--out",
                             str(tmp_path / name), "--size", "64",
                             "--classes", "3", "--seed", "9"]) == 0
        for sub in ("raw", "mask", "ref"):
            for f in sorted(os.listdir(tmp_path / "a" / sub)):
                assert (tmp_path / "a" / sub / f).read_bytes() == \
                    (tmp_path / "b" / sub / f).read_bytes()


class TestTrainVerb:
    def test_stage2_without_init_exits_1(self, tmp_path, toy_cfg_file, capsys):
        data = tmp_path / "d"
        dispatch(["synth", "--count", "4", "--out", str(data), "--size", "64",
                  "--classes", "3", "--seed", "1"])
        code = dispatch(["train", "--stage", "2", "--config", toy_cfg_file,
                         "--data", str(data), "--out", str(tmp_path / "s2")])
        assert code == 1
        assert "StagePrereqError" in capsys.readouterr().err

    def test_stage1_writes_checkpoint_and_log(self, tmp_path, toy_cfg_file):
        data = tmp_path / "d"
        dispatch(["synth", "--count", "4", "--out", str(data), "--size", "64",
                  "--classes", "3", "--seed", "1"])
        out = tmp_path / "s1"
        code = dispatch(["train", "--stage", "1", "--config", toy_cfg_file,
                         "--data", str(data), "--out", str(out),
                         "--max-steps", "1"])
        assert code == 0
        assert (out / "checkpoint" / "manifest.csv").exists()
        log = _read(out / "metrics.csv").splitlines()
        assert log[0].startswith("step,stage,pixel")
        assert len(log) == 2


class TestEvalVerb:
    def test_identity_eval(self, tmp_path, capsys):
        data = tmp_path / "d"
        dispatch(["synth", "--count", "2", "--out", str(data), "--size", "64",
                  "--classes", "3", "--seed", "4"])
        code = dispatch(["eval", "--pred", str(data / "ref"),
                         "--ref", str(data / "ref")])
        assert code == 0
        out = capsys.readouterr().out
        assert "psnr" in out.splitlines()[0]
        assert "100.000000" in out

    def test_json_flag(self, tmp_path, capsys):
        data = tmp_path / "d"
        dispatch(["synth", "--count", "1", "--out", str(data), "--size", "64",
                  "--classes", "3", "--seed", "4"])
        assert dispatch(["eval", "--pred", str(data / "ref"), "--json"]) == 0
        assert '"rows"' in capsys.readouterr().out

    def test_empty_pred_is_domain_error(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert dispatch(["eval", "--pred", str(tmp_path / "empty")]) == 1
        assert "EvalEmptyError" in capsys.readouterr().err


class TestUsageErrors:
    def test_unknown_verb(self, capsys):
        assert dispatch(["frobnicate"]) == 2

    def test_missing_required_flag(self, capsys):
        assert dispatch(["synth", "--count", "3"]) == 2


def _run_full_pipeline(tmp_path, toy_cfg_file, data):
    ck = None
    for stage in (1, 2, 3):
        out = tmp_path / f"s{stage}"
        args = ["train", "--stage", str(stage), "--config", toy_cfg_file,
                "--data", str(data), "--out", str(out)]
        if ck:
            args += ["--init-from", ck]
        assert dispatch(args) == 0
        ck = str(out / "checkpoint")
    return ck


class TestEnhanceVerb:
    def test_enhance_directory(self, tmp_path, toy_cfg_file):
        data = tmp_path / "d"
        dispatch(["synth", "--count", "4", "--out", str(data), "--size", "64",
                  "--classes", "3", "--seed", "3"])
        ck = _run_full_pipeline(tmp_path, toy_cfg_file, data)
        out = tmp_path / "pred"
        assert dispatch(["enhance", "--ckpt", ck, "--input",
                         str(data / "raw"), "--out", str(out)]) == 0
        preds = sorted(out.glob("*.png"))
        assert len(preds) == 4
        img = load_image(str(preds[0]))
        assert img.shape == (64, 64, 3)

    def test_inspect(self, tmp_path, toy_cfg_file):
        data = tmp_path / "d"
        dispatch(["synth", "--count", "2", "--out", str(data), "--size", "64",
                  "--classes", "3", "--seed", "3"])
        out1 = tmp_path / "s1"
        dispatch(["train", "--stage", "1", "--config", toy_cfg_file,
                  "--data", str(data), "--out", str(out1)])
        insp = tmp_path / "insp"
        assert dispatch(["inspect", "--ckpt", str(out1 / "checkpoint"),
                         "--data", str(data), "--out", str(insp)]) == 0
        assert (insp / "usage.csv").exists()
        assert (insp / "codebook_class0.png").exists()
