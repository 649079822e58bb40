"""Convolutional building blocks shared by the codec's networks.

Layers register their parameters in a shared Graph under dotted prefixes, so
checkpointing, freezing and hashing can select by name.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class Conv:
    """3x3/1x1 convolution with bias; He-initialized unless zero or scaled."""

    def __init__(self, graph, name, rng, cin, cout, k=3, stride=1, pad=None,
                 scale=1.0, zero=False):
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k)) * scale
        self.w = graph.parameter(f"{name}.w", w)
        self.b = graph.parameter(f"{name}.b", np.zeros((1, cout, 1, 1)))

    def __call__(self, x):
        return ad.add(ad.conv2d(x, self.w, stride=self.stride, pad=self.pad), self.b)


class ResBlock:
    """y + conv(relu(conv(relu-free y))) with matching channel count."""

    def __init__(self, graph, name, rng, ch):
        self.c1 = Conv(graph, f"{name}.c1", rng, ch, ch)
        self.c2 = Conv(graph, f"{name}.c2", rng, ch, ch)

    def __call__(self, x):
        return ad.add(x, self.c2(ad.relu(self.c1(x))))


class DownStage:
    """Stride-2 conv + relu + residual block: one encoder stage."""

    def __init__(self, graph, name, rng, cin, cout):
        self.conv = Conv(graph, f"{name}.conv", rng, cin, cout, stride=2)
        self.res = ResBlock(graph, f"{name}.res", rng, cout)

    def __call__(self, x):
        return self.res(ad.relu(self.conv(x)))


class UpStage:
    """Nearest x2 upsample + conv (+ optional injected feature) + relu + residual."""

    def __init__(self, graph, name, rng, cin, cout):
        self.conv = Conv(graph, f"{name}.conv", rng, cin, cout)
        self.res = ResBlock(graph, f"{name}.res", rng, cout)

    def __call__(self, x, inject=None):
        h = self.conv(ad.upsample_nearest(x, 2))
        if inject is not None:
            h = ad.add(h, inject)  # pre-nonlinearity fusion point
        return self.res(ad.relu(h))


class PixelDecoder:
    """Latent (c,16,16) -> image (3,256,256) through 4 x2 up-sampling stages.

    Stage outputs (spatial 32, 64, 128, 256) are exposed so a correction
    network can both mirror this layout and inject features into it.
    """

    def __init__(self, graph, prefix, rng, latent_ch, channels, with_head=True):
        self.channels = tuple(channels)
        self.stem = Conv(graph, f"{prefix}.stem", rng, latent_ch, channels[0])
        self.stages = []
        prev = channels[0]
        for i, ch in enumerate(channels):
            self.stages.append(UpStage(graph, f"{prefix}.stage{i}", rng, prev, ch))
            prev = ch
        self.head = Conv(graph, f"{prefix}.head", rng, channels[-1], 3, scale=0.1) if with_head else None

    def forward(self, latent, injections=None):
        """Returns (image_or_None, stage feature list)."""
        h = ad.relu(self.stem(latent))
        feats = []
        for i, stage in enumerate(self.stages):
            h = stage(h, None if injections is None else injections[i])
            feats.append(h)
        out = ad.tanh(self.head(h)) if self.head is not None else None
        return out, feats


class PixelEncoder:
    """Image (3,H,W) -> latent (c,H/16,W/16) through 4 stride-2 stages."""

    def __init__(self, graph, prefix, rng, channels, latent_ch):
        self.stages = []
        prev = 3
        for i, ch in enumerate(channels):
            self.stages.append(DownStage(graph, f"{prefix}.stage{i}", rng, prev, ch))
            prev = ch
        self.head = Conv(graph, f"{prefix}.head", rng, prev, latent_ch, k=1, pad=0)

    def forward(self, x):
        h = x
        for stage in self.stages:
            h = stage(h)
        return self.head(h)


class PerceptualProxy:
    """Small frozen random conv net whose feature distance stands in for a
    perceptual metric. Weights ship with the model and are never trained."""

    def __init__(self, graph, rng, prefix="proxy"):
        self.c1 = Conv(graph, f"{prefix}.c1", rng, 3, 8, stride=2)
        self.c2 = Conv(graph, f"{prefix}.c2", rng, 8, 16, stride=2)
        self.c3 = Conv(graph, f"{prefix}.c3", rng, 16, 16, stride=2)

    def features(self, x):
        return self.c3(ad.relu(self.c2(ad.relu(self.c1(x)))))
