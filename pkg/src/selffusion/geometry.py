"""Point clouds and the exact geometric kernels used throughout the network.

All distance computations use squared Euclidean distance formed from explicit
coordinate differences, so results do not depend on the ``|a|^2 + |b|^2 - 2ab``
expansion and its cancellation error. Ties are always broken towards the lowest
index.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, gather_rows
from .errors import ContractError, DataError


class Provenance(str, enum.Enum):
    PARTIAL = "partial"
    GROUND_TRUTH = "ground_truth"
    PREDICTED = "predicted"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class Transform:
    """Normalization ``p -> (p - center) / scale``."""

    center: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + self.center


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    provenance: Provenance = Provenance.SYNTHETIC
    transform: Transform | None = field(default=None, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise DataError(f"a point cloud needs shape (N>=1, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray, provenance: Provenance | None = None) -> "PointCloud":
        return replace(self, points=points, provenance=provenance or self.provenance)

    def denormalized(self) -> np.ndarray:
        if self.transform is None:
            return self.points
        return self.transform.invert(self.points)


def _coords(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    if isinstance(cloud, Tensor):
        return cloud.data
    return np.asarray(cloud)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances between every row of ``a`` and every row of ``b``.

    Works on ``(Q, 3) x (R, 3)`` or batched ``(B, Q, 3) x (B, R, 3)`` input.
    """
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.einsum("...d,...d->...", diff, diff)


def fps(cloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Returns ``m`` distinct indices in selection order, beginning with
    ``start``. Each further pick maximizes the minimum squared distance to the
    points already chosen; ties go to the lowest index. Coincident points are
    still selected as distinct indices once every farther point is taken.
    """
    pts = _coords(cloud)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ContractError(f"fps: cannot select m={m} points from a cloud of {n}")
    if not 0 <= start < n:
        raise ContractError(f"fps: start index {start} outside [0, {n})")
    return fps_batched(pts[None], m, np.array([start]))[0]


def fps_batched(points: np.ndarray, m: int, starts: np.ndarray | None = None) -> np.ndarray:
    """FPS over a batch ``(B, N, 3)``; ``starts`` holds one start index per cloud."""
    b, n, _ = points.shape
    if not 1 <= m <= n:
        raise ContractError(f"fps: cannot select m={m} points from a cloud of {n}")
    starts = np.zeros(b, dtype=np.int64) if starts is None else np.asarray(starts, dtype=np.int64)
    rows = np.arange(b)
    selected = np.empty((b, m), dtype=np.int64)
    min_d = np.full((b, n), np.inf)
    current = starts
    for i in range(m):
        selected[:, i] = current
        diff = points - points[rows, current][:, None, :]
        d = np.einsum("bnd,bnd->bn", diff, diff)
        np.minimum(min_d, d, out=min_d)
        # chosen points can never win again, even against coincident duplicates
        min_d[rows, current] = -1.0
        current = np.argmax(min_d, axis=1)
    return selected


def knn(queries, references, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest references per query.

    Sorted ascending by ``(squared distance, index)``. Accepts unbatched
    ``(Q, 3), (R, 3)`` or batched ``(B, Q, 3), (B, R, 3)`` arrays.
    """
    q, r = _coords(queries), _coords(references)
    n_ref = r.shape[-2]
    if not 1 <= k <= n_ref:
        raise ContractError(f"knn: k={k} must lie in [1, {n_ref}]")
    d = pairwise_sq_dists(q, r)
    order = np.argsort(d, axis=-1, kind="stable")
    return order[..., :k]


def group(features, neighbor_idx) -> Tensor:
    """Gather ``features[neighbor_idx]``: ``(R, C), (Q, k) -> (Q, k, C)``.

    Batched form ``(B, R, C), (B, Q, k) -> (B, Q, k, C)`` is also accepted.
    Differentiable with respect to ``features``.
    """
    if not isinstance(features, Tensor):
        features = Tensor(np.asarray(features))
    return gather_rows(features, np.asarray(neighbor_idx))


def normalize_unit_sphere(cloud) -> tuple[PointCloud, Transform]:
    """Center at the centroid and scale so the farthest point has norm 1."""
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(np.asarray(cloud, dtype=np.float64))
    pts = cloud.points
    center = pts.mean(axis=0)
    centered = pts - center
    radius = float(np.sqrt(np.einsum("nd,nd->n", centered, centered).max()))
    s = radius if radius > 0 else 1.0
    transform = Transform(center=center, scale=s)
    return PointCloud(centered / s, cloud.provenance, transform), transform
