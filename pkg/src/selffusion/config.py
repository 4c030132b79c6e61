"""Model configuration shared by every stage of the network."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError

EXTRACTORS = ("set_abstraction_knn", "graph_feature")
DECODERS = ("query_cross_attention", "transformer_upsampling")
FUSION_MODES = ("single", "double")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the CPU-scale desk setup."""

    branches: int = 3
    n_input: int = 256
    levels: tuple[int, ...] = (128, 64, 32)
    widths: tuple[int, ...] = (64, 128, 256)
    k: int = 16
    heads: int = 4
    pos_hidden: int = 16
    extractor: str = "set_abstraction_knn"
    fusion_width: int = 512
    fusion_depth: int = 1
    fusion_mode: str = "double"
    positional_encoding: bool = True
    decoder: str = "query_cross_attention"
    decoder_width: int = 128
    decoder_heads: int = 4
    decoder_layers: int = 2
    n_miss: int = 128
    n_out: int = 256
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        self.validate()

    def validate(self) -> None:
        if self.branches < 2:
            raise ConfigError(f"fusion needs at least 2 branches, got {self.branches}")
        if len(self.levels) != 3 or len(self.widths) != 3:
            raise ConfigError("the encoder has exactly three levels")
        sizes = (self.n_input,) + self.levels
        if any(a <= b for a, b in zip(sizes[1:], sizes[2:])) or self.levels[0] > self.n_input:
            raise ConfigError(f"level sizes {self.levels} must strictly decrease and not exceed n_input={self.n_input}")
        if any(w < 1 for w in self.widths) or any(a > b for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError(f"level widths {self.widths} must be positive and nondecreasing")
        if not 1 <= self.k <= min(sizes[:-1]):
            raise ConfigError(f"k={self.k} must be in [1, {min(sizes[:-1])}]")
        if any(w % self.heads for w in self.widths):
            raise ConfigError(f"head count {self.heads} must divide every level width {self.widths}")
        if self.decoder_width % self.decoder_heads:
            raise ConfigError(f"decoder heads {self.decoder_heads} must divide decoder width {self.decoder_width}")
        if self.extractor not in EXTRACTORS:
            raise ConfigError(f"unknown extractor {self.extractor!r}; choose from {EXTRACTORS}")
        if self.decoder not in DECODERS:
            raise ConfigError(f"unknown decoder {self.decoder!r}; choose from {DECODERS}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}; choose from {FUSION_MODES}")
        if self.fusion_depth < 1 or self.decoder_layers < 1 or self.fusion_width < 1:
            raise ConfigError("fusion depth, decoder layers and fusion width must be positive")
        if self.n_miss < 1 or not 1 <= self.n_out <= self.n_input + self.n_miss:
            raise ConfigError(f"need n_miss >= 1 and 1 <= n_out <= n_input + n_miss, got {self.n_miss}, {self.n_out}")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["levels"] = list(self.levels)
        out["widths"] = list(self.widths)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        values = dict(data)
        for key in ("levels", "widths"):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values)

    @property
    def fused_token_count(self) -> int:
        """Number of tokens the decoder attends to."""
        return sum(self.levels) * len(fusion_pairs(self.branches, self.fusion_mode))


def fusion_pairs(branches: int, mode: str = "double") -> list[tuple[int, int]]:
    """Ordered (source, context) branch pairs, lexicographic.

    ``double`` fuses every ordered pair; ``single`` keeps one direction per
    unordered pair (source < context).
    """
    if branches < 2:
        raise ConfigError(f"fusion needs at least 2 branches, got {branches}")
    pairs = [(i, j) for i in range(branches) for j in range(branches) if i != j]
    if mode == "single":
        pairs = [(i, j) for i, j in pairs if i < j]
    elif mode != "double":
        raise ConfigError(f"unknown fusion mode {mode!r}")
    return pairs


DEFAULT_CONFIG = ModelConfig()
