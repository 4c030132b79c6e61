"""Checkpoint evaluation and report files."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .data import Sample
from .io import atomic_write
from .metrics import DEFAULT_TAU, MetricsReport, evaluate_batch
from .model import predict_batch
from .training import model_from_checkpoint


def predict_samples(ckpt: Checkpoint, samples: list[Sample], batch_size: int = 16) -> list[np.ndarray]:
    model = model_from_checkpoint(ckpt)
    out = []
    for lo in range(0, len(samples), batch_size):
        batch = samples[lo:lo + batch_size]
        out.extend(predict_batch(model, np.stack([s.partial for s in batch])))
    return out


def evaluate(ckpt: Checkpoint, samples: list[Sample], out_dir=None, tau: float = DEFAULT_TAU,
             bypass: bool = False) -> MetricsReport:
    """Score completions of ``samples`` and optionally write report files.

    ``bypass=True`` skips the network and scores every ground truth against
    itself, which checks the reporting path in isolation. Files written:
    ``metrics.csv`` (per category plus an ``average`` row), ``metrics.json``
    and ``samples.csv`` (one row per sample).
    """
    predictions = [s.gt for s in samples] if bypass else predict_samples(ckpt, samples)
    report = evaluate_batch(((s.gt, p, s.category) for s, p in zip(samples, predictions)), tau)
    if out_dir is not None:
        out = Path(out_dir)
        atomic_write(out / "metrics.csv", report.to_csv())
        atomic_write(out / "metrics.json", report.to_json())
        atomic_write(out / "samples.csv", report.samples_csv())
    return report
