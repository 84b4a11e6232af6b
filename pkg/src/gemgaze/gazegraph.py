"""Gaze graphs: crop node features around gaze points, learn soft edges, embed with a GCN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .encoders import linear_params
from .fusion import Attention, CorrelationMap, FeedForward, LayerNorm
from .tensorcore import ParamStore, Tensor, uniform_init

PATCH = 6


@dataclass
class GazeGraph:
    nodes: Tensor  # B×K×d_n
    edges: Tensor  # B×K×K, rows sum to 1


def gaze_to_cell(point, grid) -> tuple[int, int]:
    """Normalized (x, y) -> (row, col); ``grid`` is G or (rows, cols)."""
    gh, gw = (grid, grid) if np.isscalar(grid) else grid
    x, y = float(point[0]), float(point[1])
    col = min(max(int(np.floor(x * gw)), 0), gw - 1)
    row = min(max(int(np.floor(y * gh)), 0), gh - 1)
    return row, col


def crop_window(c: int, grid: int, size: int = PATCH) -> range:
    """``size`` consecutive cells starting at c - 2, shifted to stay on the grid."""
    if grid < size:
        raise ValueError(f"grid {grid} smaller than crop size {size}")
    lo = c - (size - 1) // 2
    lo = min(max(lo, 0), grid - size)
    return range(lo, lo + size)


def crop_indices(points: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Flat cell indices (…×K×36) of the crop around every point, row-major in the window."""
    gh, gw = grid
    pts = np.asarray(points, dtype=np.float64)
    out = np.empty(pts.shape[:-1] + (PATCH * PATCH,), dtype=np.int64)
    for idx in np.ndindex(pts.shape[:-1]):
        row, col = gaze_to_cell(pts[idx], grid)
        rows = np.asarray(crop_window(row, gh))
        cols = np.asarray(crop_window(col, gw))
        out[idx] = (rows[:, None] * gw + cols[None, :]).reshape(-1)
    return out


def soft_adjacency(e: Tensor) -> Tensor:
    """Row-softmax of scaled inner products between soft edge features."""
    return tc.softmax(tc.matmul(e, tc.swap_last(e)) * (1.0 / np.sqrt(e.shape[-1])), axis=-1)


class GraphBuilder:
    """Node projection, edge generator and two-layer GCN, shared by both branches."""

    def __init__(
        self,
        store: ParamStore,
        rng: np.random.Generator,
        model_dim: int = 64,
        node_dim: int = 64,
        heads: int = 4,
        prefix: str = "graph",
    ):
        self.node_dim = node_dim
        self.proj = linear_params(store, rng, f"{prefix}.proj", PATCH * PATCH * model_dim, node_dim)
        self.enc_att = Attention(store, rng, f"{prefix}.edge.att", node_dim, node_dim, heads)
        self.enc_ln1 = LayerNorm(store, f"{prefix}.edge.ln1", node_dim)
        self.enc_ffn = FeedForward(store, rng, f"{prefix}.edge.ffn", node_dim, 2 * node_dim)
        self.enc_ln2 = LayerNorm(store, f"{prefix}.edge.ln2", node_dim)
        self.gcn = [
            store.add(f"{prefix}.gcn{i}.w", uniform_init(rng, (node_dim, node_dim), node_dim))
            for i in range(2)
        ]

    def node_features(self, hmap: CorrelationMap, points) -> Tensor:
        pts = points.data if isinstance(points, Tensor) else np.asarray(points)
        if pts.ndim == 2:
            pts = pts[None]
        idx = crop_indices(pts, hmap.grid)  # B×K×36
        b, k, _ = idx.shape
        tokens = hmap.tokens
        batch = np.arange(b)[:, None, None]
        crops = tokens[batch, idx]  # B×K×36×d
        flat = crops.reshape(b, k, -1)
        return tc.relu(tc.linear(flat, *self.proj))

    def soft_edge_features(self, nodes: Tensor) -> Tensor:
        x = self.enc_ln1(nodes + self.enc_att(nodes, nodes, nodes))
        return self.enc_ln2(x + self.enc_ffn(x))

    def edge_adjacency(self, nodes: Tensor) -> Tensor:
        return soft_adjacency(self.soft_edge_features(nodes))

    def build(self, hmap: CorrelationMap, points) -> GazeGraph:
        nodes = self.node_features(hmap, points)
        return GazeGraph(nodes=nodes, edges=self.edge_adjacency(nodes))

    def gcn_embed(self, g: GazeGraph) -> Tensor:
        n = g.nodes
        for w in self.gcn:
            n = tc.relu(tc.matmul(tc.matmul(g.edges, n), w))
        return n
