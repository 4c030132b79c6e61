"""View-free point cloud completion with multi-branch self-fusion."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .complexity import ComplexityReport, complexity
from .config import ModelConfig, fusion_pairs
from .data import ShapeSpec, generate_dataset, load_dataset, make_partial, sample_shape
from .errors import ConfigError, ContractError, DataError, DimensionError, DivergenceError, SelfFusionError
from .estimator import PointCloudCompleter
from .evaluation import evaluate
from .geometry import PointCloud, Provenance, fps, knn, normalize_unit_sphere
from .gradcheck import run_gradcheck
from .metrics import MetricsReport, chamfer_distance, f_score
from .model import CompletionNetwork, forward_complete
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CheckpointError", "ComplexityReport", "CompletionNetwork", "ConfigError", "ContractError",
    "DataError", "DimensionError", "DivergenceError", "MetricsReport", "ModelConfig", "PointCloud",
    "PointCloudCompleter", "Provenance", "SelfFusionError", "ShapeSpec", "TrainConfig", "chamfer_distance",
    "complexity", "evaluate", "f_score", "forward_complete", "fps", "fusion_pairs", "generate_dataset", "knn",
    "load_checkpoint", "load_dataset", "make_partial", "normalize_unit_sphere", "run_gradcheck", "sample_shape",
    "save_checkpoint", "train",
]
