"""Test harness setup: pin BLAS to one thread before numpy loads so runs are
reproducible and CPU-time figures are meaningful, plus shared fixtures."""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402  (after the env pinning on purpose)
import pytest  # noqa: E402


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """One full three-stage training run on 32 synthetic 256x256 textures.

    This is the expensive fixture behind the end-to-end acceptance checks;
    everything it produces (model, report, checkpoint dirs) is shared.
    """
    from dualstream.config import PipelineConfig
    from dualstream.pipeline import train_all
    from dualstream.textures import toy_corpus

    out = tmp_path_factory.mktemp("toy_run")
    cfg = PipelineConfig.toy(seed=0)
    corpus = toy_corpus(0, n=32, size=256)
    model, report = train_all(corpus, cfg, out)
    return {"model": model, "report": report, "out": out, "corpus": corpus, "cfg": cfg}
