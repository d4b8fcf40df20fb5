"""Checkpoint persistence: named arrays + plain-text manifest.

A checkpoint is a directory::

    <path>/manifest.csv    header `name,shape,dtype,frozen,stage_of_origin`,
                           one line per array, shape encoded as `2x3`
    <path>/arrays/<name>.bin   raw little-endian bytes, C order
    <path>/config.cfg      config snapshot in the plain-text config format
    <path>/rng_state.bin   opaque RNG state bytes

Array names may contain `/`, which maps onto subdirectories.  Writes go to a
temp directory that replaces the target atomically, so an interrupted save
never leaves a partial checkpoint behind.
"""

from __future__ import annotations

import os
import re
import shutil
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, config_text, parse_text
from .errors import CheckpointCorrupt

_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+(/[A-Za-z0-9_.\-]+)*$")

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "|u1",
}


@dataclass
class ArraySpec:
    shape: tuple[int, ...]
    dtype: str
    frozen: bool = False
    stage_of_origin: int = 1


@dataclass
class CheckpointBundle:
    manifest: dict[str, ArraySpec] = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    config_snapshot: RunConfig | None = None
    rng_state: bytes = b""

    def add(self, name: str, array: np.ndarray, *, frozen: bool = False,
            stage_of_origin: int = 1) -> None:
        arr = np.ascontiguousarray(array)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.dtype.name not in _DTYPES:
            arr = arr.astype(np.float32)
        self.manifest[name] = ArraySpec(
            shape=tuple(arr.shape), dtype=arr.dtype.name,
            frozen=frozen, stage_of_origin=stage_of_origin,
        )
        self.arrays[name] = arr

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self.manifest if n.startswith(prefix))


def _validate(bundle: CheckpointBundle) -> None:
    if set(bundle.manifest) != set(bundle.arrays):
        missing = set(bundle.manifest) ^ set(bundle.arrays)
        raise CheckpointCorrupt(f"manifest/array name mismatch: {sorted(missing)}")
    for name, spec in bundle.manifest.items():
        if not _NAME_RE.match(name):
            raise CheckpointCorrupt(f"illegal array name {name!r}")
        if spec.dtype not in _DTYPES:
            raise CheckpointCorrupt(f"{name}: unsupported dtype {spec.dtype}")
        arr = bundle.arrays[name]
        if tuple(arr.shape) != tuple(spec.shape):
            raise CheckpointCorrupt(
                f"{name}: manifest shape {spec.shape} != array shape {arr.shape}"
            )
        if arr.dtype.name != spec.dtype:
            raise CheckpointCorrupt(
                f"{name}: manifest dtype {spec.dtype} != array dtype {arr.dtype.name}"
            )


def _shape_text(shape: tuple[int, ...]) -> str:
    return "x".join(str(s) for s in shape) if shape else "1"


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split("x"))
    except ValueError:
        raise CheckpointCorrupt(f"bad shape field {text!r}")


def save_checkpoint(bundle: CheckpointBundle, path: str) -> None:
    """Persist a bundle; the round trip with load_checkpoint is bit-exact."""
    _validate(bundle)
    tmp = path.rstrip("/") + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(os.path.join(tmp, "arrays"), exist_ok=True)

    lines = ["name,shape,dtype,frozen,stage_of_origin"]
    for name in sorted(bundle.manifest):
        spec = bundle.manifest[name]
        lines.append(
            f"{name},{_shape_text(spec.shape)},{spec.dtype},"
            f"{'true' if spec.frozen else 'false'},{spec.stage_of_origin}"
        )
        target = os.path.join(tmp, "arrays", *name.split("/")) + ".bin"
        os.makedirs(os.path.dirname(target), exist_ok=True)
        data = np.ascontiguousarray(bundle.arrays[name]).astype(
            _DTYPES[spec.dtype], copy=False
        )
        with open(target, "wb") as fh:
            fh.write(data.tobytes())
    with open(os.path.join(tmp, "manifest.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if bundle.config_snapshot is not None:
        with open(os.path.join(tmp, "config.cfg"), "w", encoding="utf-8") as fh:
            fh.write(config_text(bundle.config_snapshot))
    with open(os.path.join(tmp, "rng_state.bin"), "wb") as fh:
        fh.write(bundle.rng_state)

    if os.path.exists(path):
        shutil.rmtree(path)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> CheckpointBundle:
    manifest_path = os.path.join(path, "manifest.csv")
    if not os.path.isfile(manifest_path):
        raise CheckpointCorrupt(f"{path}: missing manifest.csv")
    bundle = CheckpointBundle()
    with open(manifest_path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != "name,shape,dtype,frozen,stage_of_origin":
        raise CheckpointCorrupt(f"{path}: bad manifest header")
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 5:
            raise CheckpointCorrupt(f"{path}: bad manifest line {line!r}")
        name, shape_text, dtype, frozen_text, stage_text = parts
        if not _NAME_RE.match(name) or dtype not in _DTYPES:
            raise CheckpointCorrupt(f"{path}: bad manifest line {line!r}")
        if frozen_text not in ("true", "false"):
            raise CheckpointCorrupt(f"{path}: bad frozen flag {frozen_text!r}")
        try:
            stage = int(stage_text)
        except ValueError:
            raise CheckpointCorrupt(f"{path}: bad stage field {stage_text!r}")
        spec = ArraySpec(
            shape=_parse_shape(shape_text), dtype=dtype,
            frozen=frozen_text == "true", stage_of_origin=stage,
        )
        source = os.path.join(path, "arrays", *name.split("/")) + ".bin"
        if not os.path.isfile(source):
            raise CheckpointCorrupt(f"{path}: missing array file for {name}")
        raw = np.fromfile(source, dtype=_DTYPES[dtype])
        expected = int(np.prod(spec.shape)) if spec.shape else 1
        if raw.size != expected:
            raise CheckpointCorrupt(
                f"{path}: {name} has {raw.size} elements, manifest says {expected}"
            )
        bundle.manifest[name] = spec
        bundle.arrays[name] = raw.reshape(spec.shape).astype(dtype)

    config_path = os.path.join(path, "config.cfg")
    if os.path.isfile(config_path):
        with open(config_path, "r", encoding="utf-8") as fh:
            bundle.config_snapshot = parse_text(fh.read())
    rng_path = os.path.join(path, "rng_state.bin")
    if os.path.isfile(rng_path):
        with open(rng_path, "rb") as fh:
            bundle.rng_state = fh.read()
    return bundle
