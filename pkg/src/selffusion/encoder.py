"""Hierarchical per-branch point encoder.

Each of the three levels downsamples with farthest point sampling, groups
K-nearest-neighbor neighborhoods from the previous level, encodes them with a
shared pointwise MLP reduced by max, and refines the resulting tokens with a
point-transformer block. Every level's output is kept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, Tape, concat, gather_rows, permute, reduce_max, reshape
from .config import ModelConfig
from .errors import ConfigError, ContractError
from .geometry import PointCloud, fps_batched, knn
from .nn import MLP, AttentionLayer, Module


@dataclass
class LevelPlan:
    """Index bookkeeping for one level, shared by branches that see the same cloud."""

    centroid_idx: np.ndarray  # (B, m) indices into the previous level
    centroids: np.ndarray  # (B, m, 3)
    neighbors: np.ndarray  # (B, m, K) indices into the previous level
    offsets: np.ndarray  # (B, m, K, 3) neighbor minus centroid


@dataclass
class FeaturePyramid:
    """Per-level ``(centroids, tokens)`` of one branch, batched.

    ``centroids[l]`` is ``(B, M_l, 3)`` and ``tokens[l]`` is ``(B, M_l, C_l)``.
    """

    centroids: list[np.ndarray]
    tokens: list[Tensor]
    branch_id: int = 0

    @property
    def num_levels(self) -> int:
        return len(self.tokens)

    def level(self, i: int) -> tuple[np.ndarray, Tensor]:
        return self.centroids[i], self.tokens[i]


def plan_level(points: np.ndarray, m_out: int, k: int, starts=None) -> LevelPlan:
    """FPS centroids and K-NN neighborhoods over a batch ``(B, M, 3)``."""
    b, m, _ = points.shape
    if m_out > m:
        raise ContractError(f"cannot sample {m_out} centroids from {m} points")
    if k > m:
        raise ContractError(f"neighborhood size k={k} exceeds {m} available points")
    idx = fps_batched(points, m_out, starts)
    centroids = points[np.arange(b)[:, None], idx]
    neighbors = knn(centroids, points, k)
    offsets = points[np.arange(b)[:, None, None], neighbors] - centroids[:, :, None, :]
    return LevelPlan(idx, centroids, neighbors, offsets)


def plan_hierarchy(points: np.ndarray, levels, k: int, starts=None) -> list[LevelPlan]:
    """Chain :func:`plan_level` so each level samples the previous level's centroids."""
    plans = []
    current = points
    for i, m_out in enumerate(levels):
        plan = plan_level(current, m_out, k, starts if i == 0 else None)
        plans.append(plan)
        current = plan.centroids
    return plans


class SetAbstraction(Module):
    """Neighborhood encoder with max pooling over the K axis.

    ``set_abstraction_knn`` encodes ``offset ⊕ neighbor token``;
    ``graph_feature`` encodes the edge feature
    ``offset ⊕ (neighbor token - center token) ⊕ center token``.
    """

    def __init__(self, name: str, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kind: str = "set_abstraction_knn"):
        self.kind = kind
        self.in_channels = in_channels
        self.out_channels = out_channels
        edge = 3 + in_channels if kind == "set_abstraction_knn" else 3 + 2 * in_channels
        self.mlp = MLP(f"{name}.mlp", (edge, out_channels, out_channels), rng, final_relu=True)

    def __call__(self, tokens: Tensor, plan: LevelPlan) -> Tensor:
        tape = tokens.tape
        grouped = gather_rows(tokens, plan.neighbors)
        parts = [tape.constant(plan.offsets)]
        if self.kind == "set_abstraction_knn":
            parts.append(grouped)
        else:
            k = plan.neighbors.shape[-1]
            center = gather_rows(tokens, np.repeat(plan.centroid_idx[:, :, None], k, axis=2))
            parts += [grouped - center, center]
        return reduce_max(self.mlp(concat(parts, axis=-1)), axis=-2)


class PointTransformerBlock(Module):
    """Multi-head self-attention with a learned bias from pairwise centroid offsets."""

    def __init__(self, name: str, width: int, heads: int, pos_hidden: int, rng: np.random.Generator):
        if width % heads:
            raise ConfigError(f"head count {heads} must divide width {width}")
        self.heads = heads
        self.position = MLP(f"{name}.pos", (3, pos_hidden, heads), rng)
        self.layer = AttentionLayer(f"{name}.layer", width, heads, rng)

    def __call__(self, centroids: np.ndarray, tokens: Tensor) -> Tensor:
        tape = tokens.tape
        offsets = tape.constant(centroids[:, :, None, :] - centroids[:, None, :, :])
        bias = permute(self.position(offsets), (0, 3, 1, 2))
        return self.layer(tokens, tokens, bias)

    @property
    def last_weights(self) -> np.ndarray | None:
        return self.layer.last_weights


class BranchEncoder(Module):
    def __init__(self, name: str, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        widths_in = (3,) + tuple(config.widths[:-1])
        self.abstractions = [
            SetAbstraction(f"{name}.sa{i}", c_in, c_out, rng, config.extractor)
            for i, (c_in, c_out) in enumerate(zip(widths_in, config.widths))
        ]
        self.transformers = [
            PointTransformerBlock(f"{name}.pt{i}", c, config.heads, config.pos_hidden, rng)
            for i, c in enumerate(config.widths)
        ]

    def __call__(self, tape: Tape, points: np.ndarray, plans: list[LevelPlan] | None = None,
                 branch_id: int = 0) -> FeaturePyramid:
        points = np.asarray(points)
        if points.ndim == 2:
            points = points[None]
        if points.shape[1] < self.config.levels[0]:
            raise ContractError(f"cloud of {points.shape[1]} points is smaller than the first level "
                                f"({self.config.levels[0]})")
        if plans is None:
            plans = plan_hierarchy(points, self.config.levels, self.config.k)
        tokens = tape.constant(points)
        pyramid = FeaturePyramid([], [], branch_id)
        for sa, pt, plan in zip(self.abstractions, self.transformers, plans):
            tokens = pt(plan.centroids, sa(tokens, plan))
            pyramid.centroids.append(plan.centroids)
            pyramid.tokens.append(tokens)
        return pyramid


def encode_branch(cloud, encoder: BranchEncoder, tape: Tape | None = None, start: int = 0) -> FeaturePyramid:
    """Encode a single cloud into an unbatched-looking pyramid (batch of one)."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    tape = tape or Tape("narrow", record=False)
    if points.shape[0] < encoder.config.levels[0]:
        raise ContractError(f"cloud of {points.shape[0]} points is smaller than the first level "
                            f"({encoder.config.levels[0]})")
    plans = plan_hierarchy(points[None], encoder.config.levels, encoder.config.k, np.array([start]))
    return encoder(tape, points[None], plans)


def set_abstraction(points, tokens, m_out: int, layer: SetAbstraction, k: int, start: int = 0,
                    tape: Tape | None = None) -> tuple[np.ndarray, Tensor]:
    """One unbatched set-abstraction step: ``(M, 3), (M, C_in) -> (m_out, 3), (m_out, C_out)``."""
    tape = tape or Tape("wide", record=False)
    pts = np.asarray(points, dtype=np.float64)[None]
    tok = tokens if isinstance(tokens, Tensor) else tape.constant(tokens)
    if tok.ndim == 2:
        tok = reshape(tok, (1,) + tok.shape)
    plan = plan_level(pts, m_out, k, np.array([start]))
    out = layer(tok, plan)
    return plan.centroids[0], reshape(out, out.shape[1:])


def encoder_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count of one branch encoder."""
    total = 0
    c_in = 3
    for c in config.widths:
        edge = 3 + c_in if config.extractor == "set_abstraction_knn" else 3 + 2 * c_in
        total += edge * c + c + c * c + c
        total += 3 * config.pos_hidden + config.pos_hidden + config.pos_hidden * config.heads + config.heads
        total += 4 * (c * c + c) + 2 * c
        c_in = c
    return total
