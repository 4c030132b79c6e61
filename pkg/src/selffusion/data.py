"""Synthetic shapes, the partial-view occlusion simulator and on-disk datasets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError
from .geometry import PointCloud, Provenance, fps, normalize_unit_sphere
from .io import atomic_write, read_pcf, write_pcf

FAMILIES = ("sphere", "box", "cylinder", "torus", "plane_union")
MANIFEST_VERSION = 1

_DEFAULT_SIZES = {
    "sphere": {"radius": 1.0},
    "box": {"x": 1.0, "y": 0.6, "z": 0.4},
    "cylinder": {"radius": 0.5, "height": 1.2},
    "torus": {"major": 1.0, "minor": 0.3},
    "plane_union": {"width": 1.0, "height": 0.8},
}


@dataclass(frozen=True)
class ShapeSpec:
    family: str
    size: dict = field(default_factory=dict)
    n_gt: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown shape family {self.family!r}; choose from {FAMILIES}")
        if self.n_gt < 1:
            raise DataError(f"n_gt must be positive, got {self.n_gt}")
        unknown = set(self.size) - set(_DEFAULT_SIZES[self.family])
        if unknown:
            raise DataError(f"{self.family} has no size parameters {sorted(unknown)}")

    def sizes(self) -> dict:
        return {**_DEFAULT_SIZES[self.family], **self.size}

    def to_dict(self) -> dict:
        return {"family": self.family, "size": self.sizes(), "n_gt": self.n_gt, "seed": self.seed}


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _pick_by_area(rng: np.random.Generator, areas, n: int) -> np.ndarray:
    areas = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(areas), size=n, p=areas / areas.sum())


def _sample_sphere(rng, n, radius):
    # antipodal pairs keep the centroid at the origin, so normalization leaves radii at 1
    half = _unit_vectors(rng, (n + 1) // 2)
    return radius * np.concatenate([half, -half])[:n]


def _sample_box(rng, n, x, y, z):
    half = np.array([x, y, z]) / 2
    # faces: +-x, +-y, +-z with areas yz, xz, xy
    face = _pick_by_area(rng, [y * z, y * z, x * z, x * z, x * y, x * y], n)
    pts = rng.uniform(-half, half, size=(n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _sample_cylinder(rng, n, radius, height):
    part = _pick_by_area(rng, [2 * math.pi * radius * height, math.pi * radius ** 2, math.pi * radius ** 2], n)
    theta = rng.uniform(0, 2 * math.pi, n)
    r = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(0, 1, n)))
    z = np.where(part == 0, rng.uniform(-height / 2, height / 2, n), np.where(part == 1, height / 2, -height / 2))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _sample_torus(rng, n, major, minor):
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.uniform(0, 2 * math.pi, 2 * n)
        v = rng.uniform(0, 2 * math.pi, 2 * n)
        # area element is proportional to major + minor*cos(v)
        keep = rng.uniform(0, major + minor, 2 * n) < major + minor * np.cos(v)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)])
    return out[:n]


def _sample_plane_union(rng, n, width, height):
    # two perpendicular rectangles crossing along the z axis
    which = rng.integers(0, 2, n)
    a = rng.uniform(-width / 2, width / 2, n)
    z = rng.uniform(-height / 2, height / 2, n)
    zeros = np.zeros(n)
    return np.where(which[:, None] == 0, np.stack([a, zeros, z], 1), np.stack([zeros, a, z], 1))


_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
    "plane_union": _sample_plane_union,
}


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def sample_shape(spec: ShapeSpec, rotate: bool = True) -> PointCloud:
    """Surface samples of ``spec``, randomly oriented and normalized to the unit sphere."""
    rng = np.random.default_rng(spec.seed)
    pts = _SAMPLERS[spec.family](rng, spec.n_gt, **spec.sizes())
    if rotate and spec.family != "sphere":
        pts = pts @ random_rotation(rng).T
    cloud, _ = normalize_unit_sphere(PointCloud(pts, Provenance.GROUND_TRUTH))
    return cloud


def make_partial(cloud, viewpoint, keep_ratio: float) -> PointCloud:
    """Keep the ``ceil(keep_ratio * N)`` points facing ``viewpoint`` most.

    Points are ranked by their projection onto the view direction (ties by
    lower index) and returned verbatim, in their original order.
    """
    if not 0 < keep_ratio < 1:
        raise ContractError(f"keep_ratio must lie in (0, 1), got {keep_ratio}")
    v = np.asarray(viewpoint, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if v.shape != (3,) or norm == 0 or not math.isfinite(norm):
        raise ContractError(f"viewpoint must be a non-zero 3-vector, got {viewpoint!r}")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    keep = math.ceil(keep_ratio * len(pts))
    order = np.argsort(-(pts @ (v / norm)), kind="stable")[:keep]
    return PointCloud(pts[np.sort(order)], Provenance.PARTIAL)


def resample(points: np.ndarray, n: int) -> np.ndarray:
    """Bring a cloud to exactly ``n`` points.

    Larger clouds are thinned with FPS from index 0; smaller ones are padded by
    cycling through their own points, so every output point is an input point.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) >= n:
        return points[fps(points, n, 0)]
    return points[np.arange(n) % len(points)]


def default_specs(count: int, n_gt: int = 256, seed: int = 0, families=FAMILIES) -> list[ShapeSpec]:
    """``count`` specs cycling through ``families`` with jittered sizes and seeds ``seed, seed+1, ...``."""
    specs = []
    for i in range(count):
        family = families[i % len(families)]
        rng = np.random.default_rng([seed, i])
        size = {key: float(val * rng.uniform(0.7, 1.3)) for key, val in _DEFAULT_SIZES[family].items()}
        specs.append(ShapeSpec(family, size, n_gt, seed + i))
    return specs


def view_direction(seed: int) -> np.ndarray:
    return _unit_vectors(np.random.default_rng([seed, 24]), 1)[0]


def split_of(seed: int) -> str:
    return "train" if seed % 2 == 0 else "val"


@dataclass
class Sample:
    id: str
    category: str
    seed: int
    split: str
    partial: np.ndarray
    gt: np.ndarray


def generate_dataset(specs, out_dir, keep_ratio: float = 0.5) -> dict:
    """Write ground truth and partial clouds for every spec plus ``manifest.json``."""
    specs = list(specs)
    if not specs:
        raise DataError("generate_dataset: no shape specs given")
    out = Path(out_dir)
    entries = []
    for i, spec in enumerate(specs):
        gt = sample_shape(spec)
        view = view_direction(spec.seed)
        partial = make_partial(gt, view, keep_ratio)
        sid = f"{i:04d}_{spec.family}"
        gt_path, partial_path = f"shapes/{sid}_gt.pcf", f"shapes/{sid}_partial.pcf"
        try:
            write_pcf(out / gt_path, gt.points)
            write_pcf(out / partial_path, partial.points)
        except OSError as exc:
            raise DataError(f"{out / gt_path}: {exc}") from exc
        entries.append({
            "id": sid,
            "category": spec.family,
            "seed": spec.seed,
            "split": split_of(spec.seed),
            "spec": spec.to_dict(),
            "viewpoint": [float(v) for v in view],
            "keep_ratio": keep_ratio,
            "gt": gt_path,
            "partial": partial_path,
        })
    manifest = {"version": MANIFEST_VERSION, "shapes": entries}
    try:
        atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"{out / 'manifest.json'}: {exc}") from exc
    return manifest


def load_dataset(path, split: str = "all", n_input: int | None = None) -> list[Sample]:
    """Read a dataset directory (or its manifest file).

    ``split`` is ``"train"``, ``"val"`` or ``"all"``. With ``n_input`` every
    partial cloud is brought to that size by :func:`resample`.
    """
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise DataError(f"{manifest_path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"{manifest_path}: unsupported manifest version {manifest.get('version')!r}")
    if split not in ("train", "val", "all"):
        raise DataError(f"unknown split {split!r}")
    root = manifest_path.parent
    samples = []
    for entry in manifest["shapes"]:
        if split != "all" and entry["split"] != split:
            continue
        partial = read_pcf(root / entry["partial"])
        if n_input is not None:
            partial = resample(partial, n_input)
        samples.append(Sample(entry["id"], entry["category"], int(entry["seed"]), entry["split"], partial,
                              read_pcf(root / entry["gt"])))
    if not samples:
        raise DataError(f"{manifest_path}: no samples in split {split!r}")
    return samples
