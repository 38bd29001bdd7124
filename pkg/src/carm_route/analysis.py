"""Gaussian-kernel similarity between decoder state embeddings and node embeddings."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .instances import InstanceBatch, VrpInstance
from .model import ModelConfig, encode_batch, rollout
from .tensor import Tensor

DEFAULT_GAMMA = 2e-3


def gaussian_similarity(state_emb, node_embs, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """``exp(-gamma * ||state_emb - h_i||^2)`` for every row ``h_i``."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    s = np.asarray(state_emb.data if isinstance(state_emb, Tensor) else state_emb, dtype=np.float64)
    h = np.asarray(node_embs.data if isinstance(node_embs, Tensor) else node_embs, dtype=np.float64)
    diff = h - s
    return np.exp(-gamma * np.sum(diff * diff, axis=-1))


@dataclass
class SimilarityTrace:
    """Row k: similarities at the step that picked the k-th customer of ``order``.

    Columns follow ``order`` as well. ``masked[k, j]`` is set when customer
    ``order[j]`` was already visited at that step; its value is kept.
    """

    order: list[int]
    values: np.ndarray  # (n, n)
    masked: np.ndarray  # (n, n) bool
    variant: str = ""
    strategy: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def similarity_filename(variant: str, strategy: str) -> str:
    return f"{variant}_{strategy}_similarity.csv"


def trace_decode(instance: VrpInstance, params: Mapping[str, Tensor], config: ModelConfig,
                 strategy: str | None = None, forced_tour: Sequence[int] | None = None,
                 gamma: float = DEFAULT_GAMMA) -> SimilarityTrace:
    """Greedy single-trajectory decode from the depot, recording similarities.

    ``strategy`` swaps the attention mask on shared weights; ``forced_tour``
    replays a given tour instead of following the model.
    """
    strategy = strategy or config.strategy
    batch = InstanceBatch.from_instances([instance])
    nodes = encode_batch(batch, params, config)
    forced = None
    if forced_tour is not None:
        forced = np.full((1, 1, len(forced_tour) + 1), -1, dtype=np.int64)
        forced[0, 0, :len(forced_tour)] = forced_tour
        forced[0, 0, len(forced_tour)] = 0
    res = rollout(params, config, batch, None, "greedy", strategy=strategy, nodes=nodes, record=True,
                  forced=forced)
    H = nodes.data[0]
    order: list[int] = []
    rows = []
    for emb, act in zip(res.state_embeddings, res.actions):
        a = int(act[0, 0])
        if a <= 0:
            continue
        order.append(a)
        rows.append(gaussian_similarity(emb[0, 0], H, gamma))
    n = len(order)
    cols = np.array(order, dtype=np.int64)
    values = np.stack([r[cols] for r in rows]) if rows else np.zeros((0, 0))
    # customer order[j] is visited before step k iff j < k
    masked = np.arange(n)[None, :] < np.arange(n)[:, None]
    return SimilarityTrace(order, values, masked, instance.variant.name, strategy)


def export_heatmap_csv(trace: SimilarityTrace, path: str | Path) -> Path:
    """Header = visiting order; masked cells are left empty."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(trace.order)
        for k in range(len(trace.order)):
            w.writerow(["" if trace.masked[k, j] else repr(float(trace.values[k, j]))
                        for j in range(len(trace.order))])
    return path


def read_heatmap_csv(path: str | Path) -> SimilarityTrace:
    """Inverse of ``export_heatmap_csv``; masked values come back as NaN."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or not rows[0]:
        return SimilarityTrace([], np.zeros((0, 0)), np.zeros((0, 0), dtype=bool))
    order = [int(x) for x in rows[0]]
    body = rows[1:]
    if len(body) != len(order) or any(len(r) != len(order) for r in body):
        raise ValueError(f"{path}: similarity table is not {len(order)}x{len(order)}")
    masked = np.array([[cell == "" for cell in r] for r in body], dtype=bool)
    values = np.array([[np.nan if cell == "" else float(cell) for cell in r] for r in body])
    return SimilarityTrace(order, values, masked)
