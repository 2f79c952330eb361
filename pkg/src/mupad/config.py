"""Run configuration with plain-text key=value serialization.

The serialized form uses [section] headers and one key=value per line; it
is embedded into every checkpoint and written next to every report. The
environment variable MUPAD_SEED overrides the configured seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .model import ModelConfig

_SECTIONS = {
    "model": ("depth", "dim", "heads", "patch", "latent_factor", "image_side",
              "image_channels", "variant", "cls_dim", "use_zcls", "align_layer"),
    "loss": ("arm", "lambda_patch", "lambda_cls", "lambda_align"),
    "train": ("task", "lr", "beta1", "beta2", "weight_decay", "dropout", "steps",
              "seed", "batch", "ema_decay", "checkpoint_every"),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # [model]
    depth: int = 4
    dim: int = 64
    heads: int = 4
    patch: int = 2
    latent_factor: int = 4
    image_side: int = 32
    image_channels: int = 3
    variant: str = "dca"
    cls_dim: int = 32
    use_zcls: bool = True
    align_layer: int = -1
    # [loss]
    arm: str = "mupad"
    lambda_patch: float = 1.0
    lambda_cls: float = 0.1
    lambda_align: float = 0.5
    # [train]
    task: str = "generate"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    dropout: float = 0.1
    steps: int = 3000
    seed: int = 0
    batch: int = 32
    ema_decay: float = 0.9999
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.task not in ("generate", "stain"):
            raise ConfigError(f"unknown task '{self.task}'")
        if self.arm not in ("mupad", "repa", "naive"):
            raise ConfigError(f"unknown objective arm '{self.arm}'")
        if self.image_side % self.latent_factor:
            raise ConfigError("image side must be divisible by the latent factor")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        f = self.latent_factor
        return (self.image_channels * f * f, self.image_side // f, self.image_side // f)

    def model_config(self, vocab_size: int) -> ModelConfig:
        struct = self.latent_shape[0] if self.task == "stain" else 0
        return ModelConfig(
            depth=self.depth, dim=self.dim, heads=self.heads, patch=self.patch,
            latent_shape=self.latent_shape,
            cond_dims={"rna": 331, "text": 32, "image": 32},
            variant=self.variant, cls_dim=self.cls_dim, use_zcls_input=self.use_zcls,
            struct_channels=struct, align_layer=self.align_layer,
            vocab_size=vocab_size)

    def serialize(self) -> str:
        lines = []
        for section, keys in _SECTIONS.items():
            lines.append(f"[{section}]")
            for k in keys:
                lines.append(f"{k}={getattr(self, k)}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse(text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(RunConfig)}
        known = {k for keys in _SECTIONS.values() for k in keys}
        kwargs = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith(("#", "[", ";")):
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line: {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"unknown config key '{key}'")
            t = types[key]
            if t in (bool, "bool"):
                kwargs[key] = val.lower() in ("1", "true", "yes")
            elif t in (int, "int"):
                kwargs[key] = int(val)
            elif t in (float, "float"):
                kwargs[key] = float(val)
            else:
                kwargs[key] = val
        return RunConfig(**kwargs)

    def with_env_overrides(self) -> "RunConfig":
        seed = os.environ.get("MUPAD_SEED")
        if seed is None:
            return self
        out = RunConfig.parse(self.serialize())
        out.seed = int(seed)
        return out

    @staticmethod
    def load(path) -> "RunConfig":
        with open(path) as f:
            return RunConfig.parse(f.read()).with_env_overrides()
