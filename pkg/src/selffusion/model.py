"""The full completion network: branch encoders, self-fusion and decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tape, Tensor
from .config import ModelConfig
from .decoder import QueryDecoder, merge_batch
from .encoder import BranchEncoder, FeaturePyramid, plan_hierarchy
from .errors import ContractError, DataError
from .fusion import FusedFeatures, SelfFusion
from .geometry import PointCloud, Provenance
from .nn import Module


@dataclass
class ForwardResult:
    complete: Tensor  # (B, n_out, 3)
    missing: Tensor  # (B, n_miss, 3)
    selected: np.ndarray  # (B, n_out) indices into partial ⊕ missing
    pyramids: list[FeaturePyramid]
    fused: FusedFeatures


class CompletionNetwork(Module):
    """Multi-branch completion model.

    Each branch gets its own encoder initialized from an independent stream
    of the model seed, so branches never share weights.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        seeds = np.random.SeedSequence(config.seed).spawn(config.branches + 2)
        self.encoders = [BranchEncoder(f"encoder{b}", config, np.random.default_rng(seeds[b]))
                         for b in range(config.branches)]
        self.fusion = SelfFusion("fusion", config, np.random.default_rng(seeds[-2]))
        self.decoder = QueryDecoder("decoder", config, np.random.default_rng(seeds[-1]))
        names = [name for name, _ in self.named_parameters()]
        assert len(names) == len(set(names)), "parameter names must be unique"

    def parameter_dict(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def encode(self, tape: Tape, partial: np.ndarray, starts=None) -> list[FeaturePyramid]:
        plans = plan_hierarchy(partial, self.config.levels, self.config.k, starts)
        return [enc(tape, partial, plans, branch_id=b) for b, enc in enumerate(self.encoders)]

    def forward(self, tape: Tape, partial: np.ndarray, starts=None, merge_starts=None) -> ForwardResult:
        """Batched forward pass on ``(B, N, 3)`` partial clouds."""
        partial = np.asarray(partial, dtype=np.float64)
        if partial.ndim != 3 or partial.shape[-1] != 3:
            raise DataError(f"expected a (B, N, 3) batch of clouds, got {partial.shape}")
        if partial.shape[1] < self.config.levels[0]:
            raise ContractError(f"partial cloud of {partial.shape[1]} points is smaller than the first level "
                                f"({self.config.levels[0]})")
        pyramids = self.encode(tape, partial, starts)
        fused = self.fusion(pyramids)
        missing = self.decoder(fused)
        complete, selected = merge_batch(partial, missing, self.config.n_out, merge_starts)
        return ForwardResult(complete, missing, selected, pyramids, fused)


def forward_complete(model: CompletionNetwork, partial, start: int = 0, precision: str = "narrow") -> PointCloud:
    """Complete one partial cloud; every output point is copied verbatim from
    the partial input or from the predicted missing points."""
    points = partial.points if isinstance(partial, PointCloud) else np.asarray(partial, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DataError(f"expected an (N, 3) cloud, got {points.shape}")
    tape = Tape(precision, record=False)
    result = model.forward(tape, points[None], np.array([start]), np.array([start]))
    union = np.concatenate([points, result.missing.data[0].astype(np.float64)], axis=0)
    return PointCloud(union[result.selected[0]], Provenance.PREDICTED)


def predict_batch(model: CompletionNetwork, partials: np.ndarray, precision: str = "narrow") -> np.ndarray:
    """Completions for a stack of equally sized partial clouds, ``(B, n_out, 3)``."""
    partials = np.asarray(partials, dtype=np.float64)
    tape = Tape(precision, record=False)
    result = model.forward(tape, partials)
    union = np.concatenate([partials, result.missing.data.astype(np.float64)], axis=1)
    return union[np.arange(len(partials))[:, None], result.selected]
