"""Small from-scratch image and text encoders.

The image encoder is a 4-stage strided CNN whose 1/4, 1/8 and 1/16 maps are
projected to the three pyramid taps. The text encoder embeds integer tokens,
adds a sinusoidal position code, and applies one relu feed-forward layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .tensorcore import ParamStore, Tensor, uniform_init


@dataclass
class FeaturePyramid:
    f1: Tensor  # B×C1×H/16×W/16
    f2: Tensor  # B×C2×H/8×W/8
    f3: Tensor  # B×C3×H/4×W/4


@dataclass
class TextFeatures:
    global_: Tensor  # B×D
    local: Tensor  # B×M×D


def sinusoidal_1d(n: int, dim: int) -> np.ndarray:
    """Fixed transformer position code, shape n×dim."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    freq = 1.0 / (10000.0 ** (2.0 * i / dim))
    pe = np.zeros((n, dim))
    pe[:, 0 : 2 * (dim // 2) : 2] = np.sin(pos * freq)
    pe[:, 1 : 2 * (dim // 2) : 2] = np.cos(pos * freq)
    return pe


def conv_params(store: ParamStore, rng, name: str, c_out: int, c_in: int, k: int):
    fan_in = c_in * k * k
    w = store.add(f"{name}.w", uniform_init(rng, (c_out, c_in, k, k), fan_in))
    b = store.add(f"{name}.b", uniform_init(rng, (c_out,), fan_in))
    return w, b


def linear_params(store: ParamStore, rng, name: str, n_in: int, n_out: int):
    w = store.add(f"{name}.w", uniform_init(rng, (n_in, n_out), n_in))
    b = store.add(f"{name}.b", uniform_init(rng, (n_out,), n_in))
    return w, b


def conv_apply(x: Tensor, wb, stride: int = 1, pad: int = 0) -> Tensor:
    w, b = wb
    return tc.conv2d(x, w, b, stride=stride, pad=pad)


class ImageEncoder:
    """Strided CNN emitting the (f1, f2, f3) pyramid at 1/16, 1/8, 1/4 scale."""

    def __init__(
        self,
        store: ParamStore,
        rng: np.random.Generator,
        stage_channels: tuple[int, int, int, int] = (8, 16, 32, 32),
        c1: int = 64,
        c2: int = 32,
        c3: int = 16,
        prefix: str = "img",
    ):
        self.stages = []
        c_in = 1
        for i, c in enumerate(stage_channels):
            self.stages.append(conv_params(store, rng, f"{prefix}.stage{i}", c, c_in, 3))
            c_in = c
        self.proj3 = conv_params(store, rng, f"{prefix}.proj3", c3, stage_channels[1], 1)
        self.proj2 = conv_params(store, rng, f"{prefix}.proj2", c2, stage_channels[2], 1)
        self.proj1 = conv_params(store, rng, f"{prefix}.proj1", c1, stage_channels[3], 1)

    def __call__(self, image: Tensor) -> FeaturePyramid:
        return self.encode(image)

    def encode(self, image: Tensor) -> FeaturePyramid:
        x = tc.as_tensor(image)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"image extents must be divisible by 16, got {h}×{w}")
        maps = []
        for wb in self.stages:
            x = tc.relu(conv_apply(x, wb, stride=2, pad=(1, 0)))
            maps.append(x)
        return FeaturePyramid(
            f1=conv_apply(maps[3], self.proj1),
            f2=conv_apply(maps[2], self.proj2),
            f3=conv_apply(maps[1], self.proj3),
        )


class TextEncoder:
    """Token embedding + position code + relu feed-forward; global = mean of local rows."""

    def __init__(
        self,
        store: ParamStore,
        rng: np.random.Generator,
        vocab: int = 16,
        dim: int = 64,
        prefix: str = "txt",
    ):
        self.vocab = vocab
        self.dim = dim
        self.table = store.add(f"{prefix}.embed", uniform_init(rng, (vocab, dim), 1))
        self.ff = linear_params(store, rng, f"{prefix}.ff", dim, dim)

    def __call__(self, tokens) -> TextFeatures:
        return self.encode(tokens)

    def encode(self, tokens) -> TextFeatures:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            raise ValueError(f"token id out of range [0, {self.vocab}): {ids.tolist()}")
        m = ids.shape[1]
        x = tc.embed(self.table, ids) + sinusoidal_1d(m, self.dim)
        local = tc.relu(tc.linear(x, *self.ff))
        return TextFeatures(global_=tc.mean(local, axis=1), local=local)
