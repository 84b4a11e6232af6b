"""Context-aware fusion of image pyramid and query text, plus the gaze head.

Pipeline per batch::

    F1 = up2(conv1x1(f1) * mlp(g))                    # 1/8
    F2 = up2(conv1x1(cat(f2, F1)))                     # 1/4
    F3 = avg2(conv1x1(cat(f3, F2)))                    # 1/8
    Fm = conv3x3(cat(F3, coords))                      # d x H/8 x W/8
    H  = FFN(CA(SA(Fm + PE2d), local + PE1d))          # S x d

``AdditionFusion`` is the ablation baseline that merges text by addition and
skips the multi-scale path and the attention block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .encoders import FeaturePyramid, TextFeatures, conv_apply, conv_params, linear_params, sinusoidal_1d
from .tensorcore import ParamStore, Tensor


@dataclass
class CorrelationMap:
    tokens: Tensor  # B×S×d, row-major over the grid
    grid: tuple[int, int]


@dataclass
class GazePrediction:
    points: Tensor  # B×K×2, (x, y) in [0, 1]


def coord_channels(h: int, w: int) -> np.ndarray:
    """2×h×w array: channel 0 is x (varies along columns), channel 1 is y."""
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    out = np.empty((2, h, w))
    out[0] = xs[None, :]
    out[1] = ys[:, None]
    return out


def sinusoidal_2d(h: int, w: int, dim: int) -> np.ndarray:
    """(h*w)×dim code: first half encodes the row, second half the column."""
    half = dim // 2
    pe_y = sinusoidal_1d(h, half)
    pe_x = sinusoidal_1d(w, dim - half)
    out = np.concatenate(
        [np.repeat(pe_y, w, axis=0), np.tile(pe_x, (h, 1))],
        axis=1,
    )
    return out


class Attention:
    """Multi-head scaled dot-product attention with separate q/k/v/out maps."""

    def __init__(self, store: ParamStore, rng, name: str, dim: int, kv_dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"attention width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.dim = dim
        self.q = linear_params(store, rng, f"{name}.q", dim, dim)
        self.k = linear_params(store, rng, f"{name}.k", kv_dim, dim)
        self.v = linear_params(store, rng, f"{name}.v", kv_dim, dim)
        self.o = linear_params(store, rng, f"{name}.o", dim, dim)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.dim // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
        b, n, _ = queries.shape
        # scaling q rather than the scores touches S*d entries instead of S*S
        scale = 1.0 / np.sqrt(self.dim // self.heads)
        q = self._split(tc.linear(queries, *self.q) * scale)
        k = self._split(tc.linear(keys, *self.k))
        v = self._split(tc.linear(values, *self.v))
        att = tc.softmax(tc.matmul(q, tc.swap_last(k)), axis=-1)
        self.last_weights = att.data
        ctx = tc.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, n, self.dim)
        return tc.linear(ctx, *self.o)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gamma = store.add(f"{name}.gamma", np.ones(dim))
        self.beta = store.add(f"{name}.beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gamma, self.beta)


class FeedForward:
    def __init__(self, store: ParamStore, rng, name: str, dim: int, hidden: int):
        self.l1 = linear_params(store, rng, f"{name}.l1", dim, hidden)
        self.l2 = linear_params(store, rng, f"{name}.l2", hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.linear(tc.relu(tc.linear(x, *self.l1)), *self.l2)


class ContextAwareFusion:
    """Multi-scale gated fusion, CoordConv aggregation and SA/CA/FFN block."""

    def __init__(
        self,
        store: ParamStore,
        rng: np.random.Generator,
        c1: int = 64,
        c2: int = 32,
        c3: int = 16,
        text_dim: int = 64,
        width: int = 32,
        model_dim: int = 64,
        heads: int = 4,
        prefix: str = "fuse",
    ):
        if model_dim % heads:
            raise ValueError(f"model width {model_dim} not divisible by {heads} heads")
        self.c1, self.c2, self.c3 = c1, c2, c3
        self.model_dim = model_dim
        self.conv1 = conv_params(store, rng, f"{prefix}.conv1", width, c1, 1)
        self.mlp_h = linear_params(store, rng, f"{prefix}.mlp.h", text_dim, width)
        self.mlp_o = linear_params(store, rng, f"{prefix}.mlp.o", width, width)
        self.conv2 = conv_params(store, rng, f"{prefix}.conv2", width, c2 + width, 1)
        self.conv3 = conv_params(store, rng, f"{prefix}.conv3", width, c3 + width, 1)
        self.coordconv = conv_params(store, rng, f"{prefix}.coordconv", model_dim, width + 2, 3)
        self.sa = Attention(store, rng, f"{prefix}.sa", model_dim, model_dim, heads)
        self.ln1 = LayerNorm(store, f"{prefix}.ln1", model_dim)
        self.ca = Attention(store, rng, f"{prefix}.ca", model_dim, text_dim, heads)
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", model_dim)
        self.ffn = FeedForward(store, rng, f"{prefix}.ffn", model_dim, 4 * model_dim)
        self.ln3 = LayerNorm(store, f"{prefix}.ln3", model_dim)
        self.levels: dict[str, Tensor] = {}

    def text_gate(self, g: Tensor) -> Tensor:
        return tc.linear(tc.relu(tc.linear(g, *self.mlp_h)), *self.mlp_o)

    def fuse_pyramid(self, p: FeaturePyramid, g: Tensor) -> Tensor:
        h1, w1 = p.f1.shape[-2:]
        if p.f2.shape[-2:] != (2 * h1, 2 * w1) or p.f3.shape[-2:] != (4 * h1, 4 * w1):
            raise ValueError(
                f"pyramid scale mismatch: f1 {p.f1.shape}, f2 {p.f2.shape}, f3 {p.f3.shape}"
            )
        gate = self.text_gate(g)
        gate = gate.reshape(gate.shape + (1, 1))
        F1 = tc.upsample2x(conv_apply(p.f1, self.conv1) * gate)
        F2 = tc.upsample2x(conv_apply(tc.concat([p.f2, F1], axis=1), self.conv2))
        F3 = tc.avgpool2x(conv_apply(tc.concat([p.f3, F2], axis=1), self.conv3))
        b, _, h, w = F3.shape
        coords = np.broadcast_to(coord_channels(h, w), (b, 2, h, w))
        Fm = conv_apply(tc.concat([F3, tc.Tensor(coords)], axis=1), self.coordconv, pad=1)
        self.levels = {"F1": F1, "F2": F2, "F3": F3, "Fm": Fm}
        return Fm

    def attention_block(self, fm: Tensor, local: Tensor) -> CorrelationMap:
        b, d, h, w = fm.shape
        if d != self.model_dim:
            raise ValueError(f"feature width {d} != attention width {self.model_dim}")
        x = fm.reshape(b, d, h * w).transpose(0, 2, 1) + sinusoidal_2d(h, w, d)
        t = local + sinusoidal_1d(local.shape[1], local.shape[2])
        x = self.ln1(x + self.sa(x, x, x))
        x = self.ln2(x + self.ca(x, t, t))
        x = self.ln3(x + self.ffn(x))
        return CorrelationMap(tokens=x, grid=(h, w))

    def __call__(self, p: FeaturePyramid, text: TextFeatures) -> CorrelationMap:
        return self.attention_block(self.fuse_pyramid(p, text.global_), text.local)


class AdditionFusion:
    """Baseline: text added to the coarsest visual map, no attention."""

    def __init__(
        self,
        store: ParamStore,
        rng: np.random.Generator,
        c1: int = 64,
        text_dim: int = 64,
        width: int = 32,
        model_dim: int = 64,
        prefix: str = "base",
    ):
        self.model_dim = model_dim
        self.conv1 = conv_params(store, rng, f"{prefix}.conv1", width, c1, 1)
        self.text = linear_params(store, rng, f"{prefix}.text", text_dim, width)
        self.out = linear_params(store, rng, f"{prefix}.out", width, model_dim)

    def __call__(self, p: FeaturePyramid, text: TextFeatures) -> CorrelationMap:
        t = tc.linear(text.global_, *self.text)
        x = tc.relu(conv_apply(p.f1, self.conv1) + t.reshape(t.shape + (1, 1)))
        x = tc.upsample2x(x)
        b, c, h, w = x.shape
        tokens = tc.linear(x.reshape(b, c, h * w).transpose(0, 2, 1), *self.out)
        return CorrelationMap(tokens=tokens, grid=(h, w))


class GazeHead:
    """Flattened correlation map -> linear -> sigmoid -> K points."""

    def __init__(self, store: ParamStore, rng, cells: int, model_dim: int, k: int,
                 prefix: str = "head", input_scale: float | None = None):
        self.k = k
        n_in = cells * model_dim
        # layer-normed tokens have norm sqrt(d); rescaling them to unit norm keeps
        # the first adaptive steps from saturating the sigmoid
        self.input_scale = 1.0 / np.sqrt(model_dim) if input_scale is None else input_scale
        self.fc = linear_params(store, rng, f"{prefix}.fc", n_in, 2 * k)

    def __call__(self, hmap: CorrelationMap) -> GazePrediction:
        x = hmap.tokens
        flat = x.reshape(x.shape[0], x.shape[1] * x.shape[2]) * self.input_scale
        pts = tc.sigmoid(tc.linear(flat, *self.fc))
        return GazePrediction(points=pts.reshape(x.shape[0], self.k, 2))
