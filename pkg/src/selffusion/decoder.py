"""Missing-point generation and merging with the partial input."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter, Tensor, add, broadcast_leading, concat, gather_rows, log_branch
from .config import ModelConfig
from .errors import ContractError
from .fusion import FusedFeatures
from .geometry import PointCloud, Provenance, fps_batched
from .nn import MLP, AttentionLayer, LayerNorm, Linear, Module


class FeedForward(Module):
    """Post-norm residual MLP: ``layer_norm(x + mlp(x))``."""

    def __init__(self, name: str, width: int, rng: np.random.Generator):
        self.mlp = MLP(f"{name}.mlp", (width, 2 * width, width), rng)
        self.norm = LayerNorm(f"{name}.norm", width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(add(x, self.mlp(x)))


class QueryDecoder(Module):
    """Learned queries cross-attend to the fused tokens; an MLP head emits coordinates.

    With ``kind="transformer_upsampling"`` a second stage lets the queries
    attend to each other and predicts a residual offset for each coarse point.
    """

    def __init__(self, name: str, config: ModelConfig, rng: np.random.Generator):
        d = config.decoder_width
        self.kind = config.decoder
        self.n_miss = config.n_miss
        self.memory = Linear(f"{name}.memory", config.fusion_width, d, rng)
        self.memory_norm = LayerNorm(f"{name}.memory_norm", d)
        self.queries = Parameter(f"{name}.queries", rng.normal(0.0, 1.0, size=(config.n_miss, d)), "normal")
        self.cross = [AttentionLayer(f"{name}.cross{i}", d, config.decoder_heads, rng)
                      for i in range(config.decoder_layers)]
        self.ffn = [FeedForward(f"{name}.ffn{i}", d, rng) for i in range(config.decoder_layers)]
        self.head = MLP(f"{name}.head", (d, d, 3), rng)
        if self.kind == "transformer_upsampling":
            self.refine_attn = AttentionLayer(f"{name}.refine_attn", d, config.decoder_heads, rng)
            self.refine = MLP(f"{name}.refine", (d + 3, d, 3), rng)

    def __call__(self, fused) -> Tensor:
        tokens = fused.tokens if isinstance(fused, FusedFeatures) else fused
        if tokens.shape[-2] == 0:
            raise ContractError("decoder received no fused tokens")
        tape = tokens.tape
        memory = self.memory_norm(self.memory(tokens))
        q = broadcast_leading(tape.variable(self.queries), (tokens.shape[0],))
        for cross, ffn in zip(self.cross, self.ffn):
            q = ffn(cross(q, memory))
        coarse = self.head(q)
        if self.kind != "transformer_upsampling":
            return coarse
        q = self.refine_attn(q, q)
        return add(coarse, self.refine(concat([q, coarse], axis=-1)))


def decode_missing(fused: FusedFeatures, decoder: QueryDecoder) -> Tensor:
    """``(B, n_miss, 3)`` coordinates of the points the partial cloud lacks."""
    return decoder(fused)


def merge_batch(partial: np.ndarray, missing: Tensor, n_out: int, starts=None) -> tuple[Tensor, np.ndarray]:
    """Concatenate partial and predicted points, then keep ``n_out`` by FPS.

    Selection is an index choice made on the forward values; gradients reach
    only the selected predicted points. Returns the merged tensor and the
    selected indices into the union.
    """
    tape = missing.tape
    b, n_partial, _ = partial.shape
    if n_out > n_partial + missing.shape[1]:
        raise ContractError(f"cannot keep {n_out} points from {n_partial} + {missing.shape[1]}")
    union = concat([tape.constant(partial), missing], axis=1)
    idx = fps_batched(union.data.astype(np.float64), n_out, starts)
    log_branch(missing, idx)
    return gather_rows(union, idx), idx


def merge_and_resample(partial, missing, n_out: int, start: int = 0) -> PointCloud:
    """Unbatched merge of two clouds into ``n_out`` FPS-selected points."""
    p = partial.points if isinstance(partial, PointCloud) else np.asarray(partial, dtype=np.float64)
    m = missing.points if isinstance(missing, PointCloud) else np.asarray(missing, dtype=np.float64)
    total = p.shape[0] + m.shape[0]
    if not 1 <= n_out <= total:
        raise ContractError(f"cannot keep {n_out} points from {p.shape[0]} + {m.shape[0]}")
    union = np.concatenate([p, m], axis=0)
    idx = fps_batched(union[None], n_out, np.array([start]))[0]
    return PointCloud(union[idx], Provenance.PREDICTED)

