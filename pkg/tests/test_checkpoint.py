import numpy as np
import pytest

from sucode.checkpoint import (ArraySpec, CheckpointBundle, load_checkpoint,
                               save_checkpoint)
from sucode.config import RunConfig
from sucode.errors import CheckpointCorrupt


def test_round_trip_zeros(tmp_path):
    bundle = CheckpointBundle(config_snapshot=RunConfig())
    bundle.add("enc_q/w", np.zeros((2, 3), dtype=np.float32))
    save_checkpoint(bundle, str(tmp_path / "ck"))
    back = load_checkpoint(str(tmp_path / "ck"))
    assert np.array_equal(back.arrays["enc_q/w"], np.zeros((2, 3)))
    assert back.manifest["enc_q/w"].shape == (2, 3)


def test_frozen_flag_preserved(tmp_path):
    bundle = CheckpointBundle()
    bundle.add("dec_r/w", np.ones((4,), dtype=np.float32), frozen=True,
               stage_of_origin=2)
    save_checkpoint(bundle, str(tmp_path / "ck"))
    back = load_checkpoint(str(tmp_path / "ck"))
    assert back.manifest["dec_r/w"].frozen is True
    assert back.manifest["dec_r/w"].stage_of_origin == 2


def test_inconsistent_manifest_rejected(tmp_path):
    bundle = CheckpointBundle()
    bundle.manifest["x"] = ArraySpec(shape=(2, 3), dtype="float32")
    bundle.arrays["x"] = np.zeros((3, 2), dtype=np.float32)
    with pytest.raises(CheckpointCorrupt):
        save_checkpoint(bundle, str(tmp_path / "ck"))


def test_bitexact_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    bundle = CheckpointBundle(rng_state=b"opaque-bytes",
                              config_snapshot=RunConfig(seed=9))
    bundle.add("codebook/0", rng.standard_normal((8, 4)).astype(np.float32))
    bundle.add("state/step", np.asarray([17], dtype=np.int64))
    bundle.add("disc/net/0/weight",
               rng.standard_normal((4, 3, 4, 4)).astype(np.float32))
    save_checkpoint(bundle, str(tmp_path / "ck"))
    once = load_checkpoint(str(tmp_path / "ck"))
    save_checkpoint(once, str(tmp_path / "ck2"))
    twice = load_checkpoint(str(tmp_path / "ck2"))
    for name in bundle.arrays:
        assert twice.arrays[name].tobytes() == bundle.arrays[name].tobytes()
    assert twice.rng_state == b"opaque-bytes"
    assert twice.config_snapshot.seed == 9


def test_corrupt_manifest(tmp_path):
    bundle = CheckpointBundle()
    bundle.add("a", np.zeros(3, dtype=np.float32))
    save_checkpoint(bundle, str(tmp_path / "ck"))
    manifest = tmp_path / "ck" / "manifest.csv"
    manifest.write_text("totally,broken\n")
    with pytest.raises(CheckpointCorrupt):
        load_checkpoint(str(tmp_path / "ck"))


def test_size_mismatch_detected(tmp_path):
    bundle = CheckpointBundle()
    bundle.add("a", np.zeros((2, 2), dtype=np.float32))
    save_checkpoint(bundle, str(tmp_path / "ck"))
    (tmp_path / "ck" / "arrays" / "a.bin").write_bytes(b"\x00" * 4)
    with pytest.raises(CheckpointCorrupt):
        load_checkpoint(str(tmp_path / "ck"))


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointCorrupt):
        load_checkpoint(str(tmp_path / "nothing"))
