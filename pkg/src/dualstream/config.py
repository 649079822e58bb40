"""Pipeline configuration: one dataclass serialized as key = value text.

The same config file travels with every checkpoint; encoder and decoder must
load identical configs or refuse to run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError


@dataclass
class PipelineConfig:
    # representation sizes
    n_z: int = 1024                 # codebook size
    codeword_dim: int = 32          # channels of the VQ latent
    cont_channels: int = 8          # channels of the continuous latent
    cont_support: int = 31          # continuous symbols live in [-L, L]
    tile: int = 256

    # conv widths, low-to-high resolution order for the encoder,
    # high-to-low input resolution order (32,64,128,256) for the decoder
    enc_channels: tuple = (32, 64, 96, 128)
    dec_channels: tuple = (128, 96, 64, 32)
    cont_enc_channels: tuple = (32, 64, 64)
    cont_dec_channels: tuple = (64, 64, 32)

    # token predictor
    pred_width: int = 192
    pred_enc_blocks: int = 4
    pred_dec_blocks: int = 4
    pred_heads: int = 4
    pred_mlp_ratio: int = 2

    # stage 1: codebook stream
    vq_steps: int = 2000
    vq_lr: float = 1.5e-3
    vq_batch: int = 2
    vq_crop: int = 128

    # stage 1: continuous stream
    cont_steps: int = 1200
    cont_lr: float = 2e-3
    cont_batch: int = 4

    # stage 2: token predictor (self-attention warm-start, then guided)
    pred_warmup_steps: int = 150
    pred_steps: int = 450
    pred_lr: float = 1e-3
    pred_batch: int = 4

    # stage 3: correction decoder
    bridge_steps: int = 400
    bridge_lr: float = 1e-3
    bridge_batch: int = 2
    bridge_crop: int = 128

    # loss weights
    lambda_rate: float = 0.0018
    w1: float = 1.0
    w2: float = 0.1
    commit_beta: float = 0.25
    dead_code_steps: int = 200

    seed: int = 0
    holdout_fraction: float = 0.25
    trained_stages: int = 0

    @classmethod
    def toy(cls, seed: int = 0) -> "PipelineConfig":
        """Reduced widths and n_z=64: the full three-stage pipeline finishes
        on a single CPU core in well under half an hour."""
        return cls(
            n_z=64,
            codeword_dim=16,
            enc_channels=(8, 16, 24, 32),
            dec_channels=(32, 24, 16, 8),
            cont_enc_channels=(16, 32, 32),
            cont_dec_channels=(32, 32, 16),
            pred_width=64,
            vq_steps=1400, vq_crop=64,
            cont_steps=700,
            pred_warmup_steps=120, pred_steps=240,
            bridge_steps=300, bridge_crop=96,
            seed=seed,
        )

    def __post_init__(self):
        self.enc_channels = tuple(int(v) for v in self.enc_channels)
        self.dec_channels = tuple(int(v) for v in self.dec_channels)
        self.cont_enc_channels = tuple(int(v) for v in self.cont_enc_channels)
        self.cont_dec_channels = tuple(int(v) for v in self.cont_dec_channels)
        if self.n_z < 2:
            raise ConfigurationError(f"n_z must be >= 2, got {self.n_z}")
        if len(self.enc_channels) != 4 or len(self.dec_channels) != 4:
            raise ConfigurationError("enc_channels and dec_channels must have 4 stages")
        if self.pred_width % self.pred_heads != 0:
            raise ConfigurationError(
                f"pred_width {self.pred_width} not divisible by pred_heads {self.pred_heads}")
        if self.tile % 16 != 0:
            raise ConfigurationError(f"tile must be a multiple of 16, got {self.tile}")

    def save(self, path) -> None:
        lines = ["# dualstream pipeline config"]
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        raw: dict[str, str] = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            raw[key] = val
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, val in raw.items():
            if key not in fields:
                raise ConfigurationError(f"unknown config key {key!r}")
            kwargs[key] = _parse_value(val, getattr(cls, key, fields[key].default))
        return cls(**kwargs)


def _parse_value(text: str, default):
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.split(",") if v.strip())
    return text
