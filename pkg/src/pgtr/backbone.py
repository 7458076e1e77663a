"""Local neighborhood propagation over the bipartite graph."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor, leaky_relu, matmul, spmm, transpose
from .data import BipartiteGraph

__all__ = ["BackboneConfig", "normalized_adjacency", "propagate_layer", "readout"]

LEAKY_SLOPE = 0.2


@dataclass
class BackboneConfig:
    """`lightgcn` propagates by the normalized adjacency alone;
    `transform-gcn` adds a per-layer linear map and leaky nonlinearity."""

    variant: str = "lightgcn"
    layers: int = 2
    transforms: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if self.variant not in ("lightgcn", "transform-gcn"):
            raise ValueError(f"unknown backbone variant {self.variant!r}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")


def normalized_adjacency(g: BipartiteGraph) -> tuple[sp.csr_matrix, int]:
    """D^{-1/2} A D^{-1/2} over all N+M nodes plus the isolated-node count.

    Isolated nodes keep an all-zero row and propagate to zero.
    """
    adj = g.full_adjacency()
    deg = g.degrees()
    isolated = int(np.sum(deg == 0))
    with np.errstate(divide="ignore"):
        dinv = 1.0 / np.sqrt(deg)
    dinv[~np.isfinite(dinv)] = 0.0
    dhalf = sp.diags(dinv)
    return (dhalf @ adj @ dhalf).tocsr(), isolated


def propagate_layer(h: Tensor, adj: sp.csr_matrix, cfg: BackboneConfig,
                    layer: int) -> Tensor:
    if h.data.shape[0] != adj.shape[0]:
        raise ValueError("embedding table row count does not match the graph")
    out = spmm(adj, h)
    if cfg.variant == "transform-gcn":
        out = leaky_relu(matmul(out, transpose(cfg.transforms[layer])), LEAKY_SLOPE)
    return out


def readout(layer_tables: list[Tensor]) -> Tensor:
    """Arithmetic mean over the layer-0..L tables."""
    if not layer_tables:
        raise ValueError("readout needs at least one table")
    acc = layer_tables[0]
    for t in layer_tables[1:]:
        acc = acc + t
    return acc * (1.0 / len(layer_tables))
