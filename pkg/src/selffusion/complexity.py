"""Parameter and FLOP accounting.

FLOPs are counted by running one forward pass on a non-recording tape:
every matrix product contributes ``2 * m * k * n`` per batch element
(multiply-accumulate counted as two), and softmax and layer normalization
contribute 5 per output element. Elementwise ops are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .config import ModelConfig
from .model import CompletionNetwork


@dataclass(frozen=True)
class ComplexityReport:
    parameters: int
    flops: int
    input_size: int

    def to_dict(self) -> dict:
        return {"parameters": self.parameters, "flops": self.flops, "input_size": self.input_size}


def parameter_count(model: CompletionNetwork) -> int:
    return sum(p.size for p in model.parameters())


def forward_flops(model: CompletionNetwork, n_input: int | None = None) -> int:
    n = n_input or model.config.n_input
    points = np.random.default_rng(0).uniform(-1, 1, size=(1, n, 3))
    tape = Tape("narrow", record=False)
    model.forward(tape, points)
    return tape.flops


def complexity(config: ModelConfig) -> ComplexityReport:
    model = CompletionNetwork(config)
    return ComplexityReport(parameter_count(model), forward_flops(model), config.n_input)
