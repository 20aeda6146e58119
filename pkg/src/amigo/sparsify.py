"""Bernoulli node dropping for training-time graph sparsification.

Masking rows of the feature matrix and rows/columns of the adjacency is
implemented by extracting the induced subgraph of the kept nodes, so the
downstream work shrinks with the sparsity ratio instead of being spent on
zero rows.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DimensionError
from .graph import CellularGraph, induced_edges


@dataclass
class SparsityConfig:
    sparsity: float = 0.8
    apply_at_inference: bool = False
    min_kept: int = 1

    def __post_init__(self):
        if not 0.0 <= self.sparsity < 1.0:
            raise ConfigError(f"sparsity must lie in [0, 1), got {self.sparsity}")
        if self.min_kept < 1:
            raise ConfigError("min_kept must be at least 1")


def graph_rng(seed: int, image_id: str, epoch: int) -> np.random.Generator:
    """Independent stream per (seed, image, epoch), stable across processes."""
    digest = hashlib.sha256(image_id.encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, key, epoch]))


def sample_mask(c: int, s: float, rng: np.random.Generator, min_kept: int = 1) -> np.ndarray:
    """Keep each of ``c`` nodes with probability ``1 - s``.

    Draws are repeated until at least ``min(min_kept, c)`` nodes survive.
    """
    if c < 1:
        raise ValueError("sample_mask needs c >= 1")
    need = min(min_kept, c)
    while True:
        mask = rng.random(c) >= s
        if mask.sum() >= need:
            return mask


def apply_mask(graph: CellularGraph, mask: np.ndarray) -> CellularGraph:
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.size != graph.n_nodes:
        raise DimensionError(f"mask length {mask.size} != node count {graph.n_nodes}")
    if mask.all():
        return graph
    return CellularGraph(
        image_id=graph.image_id,
        modality=graph.modality,
        node_features=graph.node_features[mask],
        positions=graph.positions[mask],
        edges=induced_edges(graph.edges, mask),
        image_extent=graph.image_extent,
        patient_id=graph.patient_id,
    )


def sparsify(graph: CellularGraph, cfg: SparsityConfig, seed: int, epoch: int) -> CellularGraph:
    if cfg.sparsity == 0.0:
        return graph
    rng = graph_rng(seed, graph.image_id, epoch)
    return apply_mask(graph, sample_mask(graph.n_nodes, cfg.sparsity, rng, cfg.min_kept))
