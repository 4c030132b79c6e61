"""Chamfer loss, F-score and batch evaluation reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .autodiff import Tensor, log_branch, mean_all, record_op, reshape
from .errors import ConfigError, ContractError
from .geometry import PointCloud, pairwise_sq_dists

CSV_COLUMNS = ("category", "count", "cd_x1e3", "fscore")
DEFAULT_TAU = 1e-3


def _points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _check_nonempty(*arrays: np.ndarray) -> None:
    for a in arrays:
        if a.ndim < 2 or a.shape[-2] == 0:
            raise ContractError(f"point set must be non-empty, got shape {a.shape}")


def _sorted_mean(values: np.ndarray) -> np.ndarray:
    # sorting first makes the sum independent of point order
    return np.sort(values, axis=-1).sum(axis=-1) / values.shape[-1]


def chamfer_terms(y: np.ndarray, y_hat: np.ndarray):
    """Nearest-neighbor pairing and the two directional mean terms."""
    d = pairwise_sq_dists(y, y_hat)
    nn_of_y = np.argmin(d, axis=-1)
    nn_of_hat = np.argmin(d, axis=-2)
    min_y = np.take_along_axis(d, nn_of_y[..., None], axis=-1)[..., 0]
    min_hat = np.take_along_axis(d, nn_of_hat[..., None, :], axis=-2)[..., 0, :]
    return _sorted_mean(min_y), _sorted_mean(min_hat), nn_of_y, nn_of_hat


def chamfer_distance_batch(y, y_hat) -> Tensor:
    """Per-sample Chamfer distance for batches ``(B, N, 3)`` and ``(B, M, 3)``.

    The nearest-neighbor pairing found in the forward pass is held fixed for
    the backward pass. Gradients flow to whichever argument is a recorded
    tensor.
    """
    yt = y if isinstance(y, Tensor) else None
    ht = y_hat if isinstance(y_hat, Tensor) else None
    tape = (ht.tape if ht is not None else None) or (yt.tape if yt is not None else None)
    yd, hd = _points(y), _points(y_hat)
    if yd.ndim != 3 or hd.ndim != 3 or yd.shape[0] != hd.shape[0]:
        raise ContractError(f"chamfer_distance_batch: need (B, N, 3) and (B, M, 3), got {yd.shape}, {hd.shape}")
    _check_nonempty(yd, hd)
    dtype = tape.dtype if tape is not None else np.result_type(yd, hd)
    yd, hd = yd.astype(dtype, copy=False), hd.astype(dtype, copy=False)
    term_y, term_hat, nn_of_y, nn_of_hat = chamfer_terms(yd, hd)
    out = (term_y + term_hat).astype(dtype)
    log_branch(ht if ht is not None else yt, np.concatenate([nn_of_y.ravel(), nn_of_hat.ravel()]))
    b, n, _ = yd.shape
    m = hd.shape[1]
    rows = np.arange(b)[:, None]

    def backward(g):
        g = g[:, None, None]
        # y_i -> its nearest y_hat, and y_hat_j -> its nearest y
        diff_y = yd - hd[rows, nn_of_y]
        diff_hat = hd - yd[rows, nn_of_hat]
        grad_hat = 2.0 / m * diff_hat
        grad_y = 2.0 / n * diff_y
        flat_hat = np.zeros((b * m, 3), dtype=dtype)
        np.add.at(flat_hat, (nn_of_y + rows * m).ravel(), (-2.0 / n * diff_y).reshape(-1, 3))
        flat_y = np.zeros((b * n, 3), dtype=dtype)
        np.add.at(flat_y, (nn_of_hat + rows * n).ravel(), (-2.0 / m * diff_hat).reshape(-1, 3))
        grad_hat = grad_hat + flat_hat.reshape(b, m, 3)
        grad_y = grad_y + flat_y.reshape(b, n, 3)
        return (g * grad_y).astype(dtype), (g * grad_hat).astype(dtype)

    inputs = (yt if yt is not None else Tensor(yd, tape=tape), ht if ht is not None else Tensor(hd, tape=tape))
    return record_op("chamfer", inputs, out, backward)


def chamfer_distance(y, y_hat) -> Tensor:
    """Chamfer distance between two clouds as a scalar tensor.

    Sum of the mean squared nearest-neighbor distance from ``y`` to
    ``y_hat`` and from ``y_hat`` to ``y``.
    """
    yd, hd = _points(y), _points(y_hat)
    if yd.ndim != 2 or hd.ndim != 2:
        raise ContractError(f"chamfer_distance: need (N, 3) clouds, got {yd.shape}, {hd.shape}")
    _check_nonempty(yd, hd)

    def batched(x, data):
        if isinstance(x, Tensor):
            return reshape(x, (1,) + x.shape)
        return data[None]

    return reshape(chamfer_distance_batch(batched(y, yd), batched(y_hat, hd)), ())


def chamfer_value(y, y_hat) -> float:
    """Plain float Chamfer distance, no tape involved."""
    term_y, term_hat, _, _ = chamfer_terms(_points(y).astype(np.float64), _points(y_hat).astype(np.float64))
    return float(term_y + term_hat)


def _within(sq_dist: np.ndarray, tau: float) -> np.ndarray:
    # thresholds plain Euclidean distance; squared distances are compared against tau**2
    return np.sqrt(sq_dist) < tau


def f_score(y, y_hat, tau: float = DEFAULT_TAU) -> float:
    """Harmonic mean of precision (of ``y_hat``) and recall (of ``y``) at ``tau``."""
    if tau <= 0:
        raise ContractError(f"f_score: tau must be positive, got {tau}")
    yd, hd = _points(y).astype(np.float64), _points(y_hat).astype(np.float64)
    _check_nonempty(yd, hd)
    d = pairwise_sq_dists(yd, hd)
    precision = float(np.mean(_within(d.min(axis=0), tau)))
    recall = float(np.mean(_within(d.min(axis=1), tau)))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# pluggable training losses


@dataclass(frozen=True)
class LossKind:
    """Training-loss selector: ``vanilla_cd`` or a named external variant."""

    tag: str = "vanilla_cd"
    name: str | None = None
    parameters: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.tag == "vanilla_cd":
            if self.parameters or self.name:
                raise ConfigError("vanilla_cd takes no parameters")
        elif self.tag == "external":
            if not self.name:
                raise ConfigError("an external loss needs a name")
        else:
            raise ConfigError(f"unknown loss tag {self.tag!r}")

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        """``"vanilla_cd"`` or ``"<name>[:key=value,...]"`` for external slots."""
        if text in ("", "vanilla_cd", "cd"):
            return cls()
        name, _, rest = text.partition(":")
        params = {}
        for item in filter(None, rest.split(",")):
            key, _, value = item.partition("=")
            try:
                params[key.strip()] = float(value)
            except ValueError as exc:
                raise ConfigError(f"loss parameter {item!r} is not key=number") from exc
        return cls("external", name.strip(), params)

    def __str__(self) -> str:
        if self.tag == "vanilla_cd":
            return "vanilla_cd"
        args = ",".join(f"{k}={v!r}" for k, v in sorted(self.parameters.items()))
        return f"{self.name}:{args}" if args else str(self.name)


LossFn = Callable[..., Tensor]
_EXTERNAL_LOSSES: dict[str, LossFn] = {}


def register_loss(name: str, fn: LossFn) -> None:
    """Install an external loss ``fn(y, y_hat, **parameters) -> (B,) Tensor``."""
    _EXTERNAL_LOSSES[name] = fn


def batch_loss(kind: LossKind, y, y_hat) -> Tensor:
    """Mean training loss over a batch."""
    if kind.tag == "vanilla_cd":
        per_sample = chamfer_distance_batch(y, y_hat)
    else:
        try:
            fn = _EXTERNAL_LOSSES[kind.name]
        except KeyError:
            raise ConfigError(f"external loss {kind.name!r} is not registered") from None
        per_sample = fn(y, y_hat, **kind.parameters)
    return mean_all(per_sample)


# ---------------------------------------------------------------------------
# reports


@dataclass
class SampleMetrics:
    category: str
    cd: float
    f_score: float


@dataclass
class MetricsReport:
    mean_cd_times_1e3: float
    f_score_at_tau: float
    per_category: dict[str, tuple[float, float]]
    category_counts: dict[str, int]
    count: int
    tau: float = DEFAULT_TAU
    samples: list[SampleMetrics] = field(default_factory=list)

    def rows(self) -> list[tuple[str, int, float, float]]:
        out = [(name, self.category_counts[name], cd, f) for name, (cd, f) in sorted(self.per_category.items())]
        out.append(("average", self.count, self.mean_cd_times_1e3, self.f_score_at_tau))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for name, count, cd, f in self.rows():
            writer.writerow([name, count, repr(float(cd)), repr(float(f))])
        return buf.getvalue()

    def samples_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("index", "category", "cd_x1e3", "fscore"))
        for i, s in enumerate(self.samples):
            writer.writerow([i, s.category, repr(s.cd * 1e3), repr(s.f_score)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "tau": self.tau,
            "mean_cd_x1e3": self.mean_cd_times_1e3,
            "mean_fscore": self.f_score_at_tau,
            "per_category": {
                name: {"count": self.category_counts[name], "cd_x1e3": cd, "fscore": f}
                for name, (cd, f) in sorted(self.per_category.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _exact_mean(values: Iterable[float]) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def evaluate_batch(pairs, tau: float = DEFAULT_TAU) -> MetricsReport:
    """Aggregate CD (reported times 1e3) and F-score over ``(y, y_hat, category)`` triples.

    Means use exactly rounded sums, so the report does not depend on the order
    of the pairs.
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractError("evaluate_batch: empty batch")
    samples = [SampleMetrics(str(cat), chamfer_value(y, y_hat), f_score(y, y_hat, tau)) for y, y_hat, cat in pairs]
    by_cat: dict[str, list[SampleMetrics]] = {}
    for s in samples:
        by_cat.setdefault(s.category, []).append(s)
    per_category = {
        name: (_exact_mean(s.cd for s in group) * 1e3, _exact_mean(s.f_score for s in group))
        for name, group in by_cat.items()
    }
    return MetricsReport(
        mean_cd_times_1e3=_exact_mean(s.cd for s in samples) * 1e3,
        f_score_at_tau=_exact_mean(s.f_score for s in samples),
        per_category=per_category,
        category_counts={name: len(group) for name, group in by_cat.items()},
        count=len(samples),
        tau=tau,
        samples=samples,
    )
