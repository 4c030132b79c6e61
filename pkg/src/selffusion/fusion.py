"""Attention-based fusion of the feature pyramids of several encoder branches.

For every ordered branch pair ``(i, j)`` and every level, a fusion block lets
the tokens of branch ``i`` attend to the tokens of branch ``j`` (cross
attention), then to themselves (self attention), and finally projects them to
a common width so that all levels can be concatenated for the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, concat, reshape
from .config import ModelConfig, fusion_pairs
from .encoder import FeaturePyramid
from .errors import ConfigError
from .nn import MLP, AttentionLayer, Linear, Module


class PositionalEncoding(Module):
    """Per-level MLP on raw centroid coordinates, added to the level tokens."""

    def __init__(self, name: str, widths, rng: np.random.Generator):
        self.mlps = [MLP(f"{name}.l{i}", (3, c, c), rng) for i, c in enumerate(widths)]

    def __call__(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        tokens = []
        for mlp, centroids, tok in zip(self.mlps, pyramid.centroids, pyramid.tokens):
            tokens.append(add(tok, mlp(tok.tape.constant(centroids))))
        return FeaturePyramid(list(pyramid.centroids), tokens, pyramid.branch_id)

    def zero_(self) -> "PositionalEncoding":
        for mlp in self.mlps:
            mlp.last.zero_()
        return self


def add_positional_encoding(pyramid: FeaturePyramid, encoding: PositionalEncoding) -> FeaturePyramid:
    return encoding(pyramid)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    return x, False


def cross_attention(src: Tensor, ctx: Tensor, layer: AttentionLayer) -> Tensor:
    """Queries from ``src``, keys and values from ``ctx``; residual and layer norm included."""
    if src.shape[-1] != ctx.shape[-1]:
        raise ConfigError(f"cross attention needs equal widths, got {src.shape[-1]} and {ctx.shape[-1]}")
    s, squeeze = _batched(src)
    c, _ = _batched(ctx)
    out = layer(s, c)
    return reshape(out, out.shape[1:]) if squeeze else out


def self_attention(tokens: Tensor, layer: AttentionLayer) -> Tensor:
    return cross_attention(tokens, tokens, layer)


class SelfFusionBlock(Module):
    """``depth`` rounds of (cross attention, self attention), then a projection."""

    def __init__(self, name: str, width: int, heads: int, out_width: int, rng: np.random.Generator,
                 depth: int = 1):
        self.cross = [AttentionLayer(f"{name}.cross{d}", width, heads, rng) for d in range(depth)]
        self.self_attn = [AttentionLayer(f"{name}.self{d}", width, heads, rng) for d in range(depth)]
        self.proj = Linear(f"{name}.proj", width, out_width, rng)

    def __call__(self, src: Tensor, ctx: Tensor) -> Tensor:
        s, squeeze = _batched(src)
        c, _ = _batched(ctx)
        x = s
        for cross, self_attn in zip(self.cross, self.self_attn):
            x = cross(x, c)
            x = self_attn(x, x)
        out = self.proj(x)
        return reshape(out, out.shape[1:]) if squeeze else out


@dataclass
class TokenSet:
    source: int
    context: int
    level: int
    tokens: Tensor


@dataclass
class FusedFeatures:
    """Fused token sets in (source, context, level) order plus their concatenation."""

    token_sets: list[TokenSet]
    tokens: Tensor  # (B, sum of set sizes, fusion width)

    def __len__(self) -> int:
        return len(self.token_sets)


class SelfFusion(Module):
    """All positional encodings and fusion blocks of a model."""

    def __init__(self, name: str, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.pairs = fusion_pairs(config.branches, config.fusion_mode)
        self.encodings = ([PositionalEncoding(f"{name}.pe{b}", config.widths, rng) for b in range(config.branches)]
                          if config.positional_encoding else [])
        self.blocks = {
            (i, j, level): SelfFusionBlock(f"{name}.b{i}{j}.l{level}", width, config.heads,
                                           config.fusion_width, rng, config.fusion_depth)
            for i, j in self.pairs
            for level, width in enumerate(config.widths)
        }

    def named_parameters(self):
        for enc in self.encodings:
            yield from enc.named_parameters()
        for key in sorted(self.blocks):
            yield from self.blocks[key].named_parameters()

    def __call__(self, pyramids: list[FeaturePyramid]) -> FusedFeatures:
        return fuse_branches(pyramids, self)


def fuse_branches(pyramids, fusion: SelfFusion) -> FusedFeatures:
    """Apply every (source, context, level) fusion block and concatenate the results."""
    pyramids = list(pyramids)
    if len(pyramids) < 2:
        raise ConfigError(f"fusion needs at least 2 branches, got {len(pyramids)}")
    if len(pyramids) != fusion.config.branches:
        raise ConfigError(f"fusion built for {fusion.config.branches} branches, got {len(pyramids)}")
    levels = {p.num_levels for p in pyramids}
    if len(levels) != 1:
        raise ConfigError(f"pyramids are not level-aligned: level counts {sorted(levels)}")
    if fusion.encodings:
        pyramids = [enc(p) for enc, p in zip(fusion.encodings, pyramids)]
    sets = []
    for (i, j, level) in sorted(fusion.blocks):
        out = fusion.blocks[(i, j, level)](pyramids[i].tokens[level], pyramids[j].tokens[level])
        sets.append(TokenSet(i, j, level, out))
    return FusedFeatures(sets, concat([s.tokens for s in sets], axis=-2))
