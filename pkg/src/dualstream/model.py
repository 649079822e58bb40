"""Model bundle: every network of the codec behind one Graph, one RNG, and
one on-disk layout (config.txt + weights.bin + complexity_stats.bin)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bridge import CorrectionNet
from .config import PipelineConfig
from .cont import ContStream
from .errors import ConfigurationError
from .masking import ComplexityStats
from .nets import PerceptualProxy
from .predictor import TokenPredictor
from .vq import VqStream

WEIGHTS_FILE = "weights.bin"
CONFIG_FILE = "config.txt"
STATS_FILE = "complexity_stats.bin"

PREFIXES = ("vq.", "cont.", "pred.", "corr.", "proxy.")


class CountingRng:
    """Seeded generator that counts every draw, so inference code paths can
    assert they consumed no randomness."""

    def __init__(self, seed: int):
        self._rng = np.random.default_rng(np.random.PCG64(seed))
        self.draws = 0

    def normal(self, *args, **kwargs):
        self.draws += 1
        return self._rng.normal(*args, **kwargs)

    def uniform(self, *args, **kwargs):
        self.draws += 1
        return self._rng.uniform(*args, **kwargs)

    def integers(self, *args, **kwargs):
        self.draws += 1
        return self._rng.integers(*args, **kwargs)

    def choice(self, *args, **kwargs):
        self.draws += 1
        return self._rng.choice(*args, **kwargs)

    def permutation(self, *args, **kwargs):
        self.draws += 1
        return self._rng.permutation(*args, **kwargs)


class CodecModel:
    """All trainable pieces of the codec plus calibration state."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.graph = ad.Graph()
        self.rng = CountingRng(cfg.seed)
        self.vq = VqStream(self.graph, self.rng, cfg)
        self.cont = ContStream(self.graph, self.rng, cfg)
        self.predictor = TokenPredictor(self.graph, self.rng, cfg)
        self.corr = CorrectionNet(self.graph, self.rng, cfg)
        self.proxy = PerceptualProxy(self.graph, self.rng)
        self.stats: ComplexityStats | None = None
        self.predictor.trained = cfg.trained_stages >= 2

    @property
    def trained_stages(self) -> int:
        return self.cfg.trained_stages

    def mark_stage_done(self, stage: int) -> None:
        self.cfg.trained_stages = max(self.cfg.trained_stages, stage)
        if stage >= 2:
            self.predictor.trained = True

    def require_trained(self) -> None:
        if self.cfg.trained_stages < 3:
            raise ConfigurationError(
                f"model has completed {self.cfg.trained_stages}/3 training stages")

    def digest(self, prefix: str = "") -> str:
        return self.graph.digest(prefix)

    def digests(self) -> dict:
        return {p: self.graph.digest(p) for p in PREFIXES}

    # -- persistence -------------------------------------------------------------

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.cfg.save(out / CONFIG_FILE)
        ad.save_params(out / WEIGHTS_FILE, self.graph.state_dict())
        if self.stats is not None:
            self.stats.save(out / STATS_FILE)

    @classmethod
    def load(cls, model_dir) -> "CodecModel":
        d = Path(model_dir)
        if not (d / CONFIG_FILE).exists():
            raise ConfigurationError(f"no {CONFIG_FILE} in {d}")
        cfg = PipelineConfig.load(d / CONFIG_FILE)
        model = cls(cfg)
        model.graph.load_state_dict(ad.load_params(d / WEIGHTS_FILE))
        if (d / STATS_FILE).exists():
            model.stats = ComplexityStats.load(d / STATS_FILE)
        return model
