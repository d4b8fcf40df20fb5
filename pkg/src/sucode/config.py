"""Run configuration: parsing, validation and serialization.

Configs are hierarchical plain-text key/value files.  Keys may appear flat
(``epochs = 40``), dotted (``loss.beta = 0.25``) or under ``[section]``
headers; only the last path component selects the field.  Unknown keys are
warnings, not errors.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace

from .errors import ConfigInvalid, ConfigNotFound

log = logging.getLogger("sucode.config")


@dataclass
class RunConfig:
    class_count: int = 8
    codebook_entries: int = 256
    embed_dim: int = 256
    image_size: int = 256
    downsample_factor: int = 8
    stage: int = 1
    epochs: int = 200
    batch_size: int = 4
    lr_generator: float = 1e-4
    lr_discriminator: float = 4e-4
    beta: float = 0.25
    lambda_s: float = 0.1
    lambda_adv: float = 0.1
    lambda_adv_stage3: float = 0.1
    seed: int = 0
    class_remap: dict[int, int] | None = None
    # every upsampling scale carries a fusion block unless set to "last"
    faff_scales: str = "all"
    freeze_encoder_stage3: bool = False

    def validate(self) -> "RunConfig":
        if self.class_count < 1:
            raise ConfigInvalid("class_count", "must be >= 1")
        if self.codebook_entries < 2:
            raise ConfigInvalid("codebook_entries", "must be >= 2")
        if self.embed_dim < 1:
            raise ConfigInvalid("embed_dim", "must be >= 1")
        if self.beta <= 0:
            raise ConfigInvalid("beta", "must be > 0")
        for name in ("lambda_s", "lambda_adv", "lambda_adv_stage3"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(name, "must be >= 0")
        if self.stage not in (1, 2, 3):
            raise ConfigInvalid("stage", "must be one of 1, 2, 3")
        if self.downsample_factor < 1 or self.image_size % self.downsample_factor:
            raise ConfigInvalid(
                "image_size",
                f"{self.image_size} not divisible by downsample_factor "
                f"{self.downsample_factor}",
            )
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigInvalid("epochs" if self.epochs < 0 else "batch_size", "out of range")
        if self.faff_scales not in ("all", "last"):
            raise ConfigInvalid("faff_scales", "must be 'all' or 'last'")
        if self.class_remap is not None:
            for old, new in self.class_remap.items():
                if not (0 <= new < self.class_count):
                    raise ConfigInvalid("class_remap", f"{old}->{new} out of range")
        return self


_INT_FIELDS = {
    "class_count", "codebook_entries", "embed_dim", "image_size",
    "downsample_factor", "stage", "epochs", "batch_size", "seed",
}
_FLOAT_FIELDS = {
    "lr_generator", "lr_discriminator", "beta", "lambda_s",
    "lambda_adv", "lambda_adv_stage3",
}
_BOOL_FIELDS = {"freeze_encoder_stage3"}
_STR_FIELDS = {"faff_scales"}


def _parse_remap(text: str) -> dict[int, int]:
    table = {}
    for pair in text.replace(";", ",").split(","):
        pair = pair.strip()
        if not pair:
            continue
        try:
            old, new = pair.split(":")
            table[int(old)] = int(new)
        except ValueError:
            raise ConfigInvalid("class_remap", f"bad entry {pair!r}")
    return table


def _remap_text(table: dict[int, int]) -> str:
    return ",".join(f"{k}:{v}" for k, v in sorted(table.items()))


def parse_text(text: str) -> RunConfig:
    values: dict[str, object] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, value = line.split(sep, 1)
                break
        else:
            raise ConfigInvalid("syntax", f"line {lineno}: {raw!r}")
        key = key.strip()
        if section:
            key = f"{section}.{key}"
        key = key.split(".")[-1]
        value = value.strip()
        try:
            if key in _INT_FIELDS:
                values[key] = int(value)
            elif key in _FLOAT_FIELDS:
                values[key] = float(value)
            elif key in _BOOL_FIELDS:
                values[key] = value.lower() in ("1", "true", "yes", "on")
            elif key in _STR_FIELDS:
                values[key] = value
            elif key == "class_remap":
                values[key] = _parse_remap(value)
            else:
                log.warning("unknown config key %r ignored", key)
        except ConfigInvalid:
            raise
        except ValueError:
            raise ConfigInvalid(key, f"bad value {value!r}")
    return RunConfig(**values).validate()


def parse_config(path: str) -> RunConfig:
    """Load a config file, filling every unset field with its default."""
    if not os.path.isfile(path):
        raise ConfigNotFound(path)
    with open(path, "r", encoding="utf-8") as fh:
        return parse_text(fh.read())


def config_text(config: RunConfig) -> str:
    """Render a config back to the plain-text format (parse round trips)."""
    lines = []
    for name in (
        "class_count", "codebook_entries", "embed_dim", "image_size",
        "downsample_factor", "stage", "epochs", "batch_size",
        "lr_generator", "lr_discriminator", "beta", "lambda_s",
        "lambda_adv", "lambda_adv_stage3", "seed", "faff_scales",
        "freeze_encoder_stage3",
    ):
        lines.append(f"{name} = {getattr(config, name)}")
    if config.class_remap is not None:
        lines.append(f"class_remap = {_remap_text(config.class_remap)}")
    return "\n".join(lines) + "\n"


def with_overrides(config: RunConfig, **kwargs) -> RunConfig:
    """Return a validated copy with the given fields replaced."""
    return replace(config, **kwargs).validate()
