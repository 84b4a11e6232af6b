"""Soft graph matching between ground-truth and predicted gaze graphs.

affinity (nt A ns^T) -> instance norm + exp -> Sinkhorn -> doubly-stochastic C.
The loss pushes C towards the identity (node i of one graph matches node i
of the other).
"""

from __future__ import annotations

import numpy as np

from . import tensorcore as tc
from .gazegraph import GazeGraph, GraphBuilder
from .tensorcore import ParamStore, Tensor

SINKHORN_FLOOR = 1e-9


def affinity_matrix(nt: Tensor, ns: Tensor, a: Tensor) -> Tensor:
    """M[i, j] = nt_i^T A ns_j; node counts and widths must agree."""
    if nt.shape != ns.shape:
        raise ValueError(f"affinity: graphs differ in shape {nt.shape} vs {ns.shape}")
    return tc.matmul(tc.matmul(nt, a), tc.swap_last(ns))


def positive_normalize(m: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the whole matrix, then exponentiate so every entry is > 0."""
    return tc.exp(tc.instance_norm(m, eps))


def sinkhorn(m: Tensor, iters: int = 20) -> Tensor:
    """Alternate column and row normalisation, ``iters`` passes each.

    The sequence ends on a row pass, so rows sum to 1 exactly and columns to
    within the convergence error.
    """
    if iters < 1:
        raise ValueError("sinkhorn needs at least one iteration")
    if np.any(m.data <= 0):
        raise ValueError("sinkhorn input must be strictly positive")
    x = m + SINKHORN_FLOOR
    for _ in range(iters):
        x = x / x.sum(axis=-2, keepdims=True)
        x = x / x.sum(axis=-1, keepdims=True)
    return x


def correspondence_loss(c: Tensor) -> Tensor:
    """Row-wise cross-entropy against the identity target: -mean_i log c[i, i]."""
    k = c.shape[-1]
    diag = (c * np.eye(k)).sum(axis=-1)
    if np.any(diag.data <= 0):
        raise ValueError("correspondence matrix has a non-positive diagonal entry")
    return -tc.mean(tc.log(diag))


class Matcher:
    """GCN embedding of both graphs (shared weights) followed by the AIS head."""

    def __init__(self, store: ParamStore, graphs: GraphBuilder, node_dim: int = 64,
                 iters: int = 20, prefix: str = "match"):
        self.graphs = graphs
        self.iters = iters
        self.a = store.add(f"{prefix}.affinity", np.eye(node_dim))

    def __call__(self, gt: GazeGraph, pred: GazeGraph) -> Tensor:
        return self.ais_correspondence(gt, pred)

    def ais_correspondence(self, gt: GazeGraph, pred: GazeGraph) -> Tensor:
        nt = self.graphs.gcn_embed(gt)
        ns = self.graphs.gcn_embed(pred)
        m = affinity_matrix(nt, ns, self.a)
        return sinkhorn(positive_normalize(m), self.iters)
