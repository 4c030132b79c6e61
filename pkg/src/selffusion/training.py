"""Adaptive-moment training loop with deterministic seeding and checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Tape, mean_all
from .checkpoint import Checkpoint, load_into, save_checkpoint
from .config import ModelConfig
from .data import Sample
from .errors import ConfigError, DataError, DivergenceError
from .io import atomic_write
from .metrics import LossKind, batch_loss, chamfer_distance_batch
from .model import CompletionNetwork

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Augmentation:
    """Random rotation about the vertical axis and Gaussian jitter of the partial input."""

    rotation_range: float = 0.0  # radians, uniform in [-range, range]
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    loss: LossKind = field(default_factory=LossKind)
    augmentation: Augmentation | None = None
    checkpoint_every: int = 0
    precision: str = "narrow"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ConfigError("invalid optimizer hyperparameters")
        if self.model.seed != self.seed:
            object.__setattr__(self, "model", self.model.replace(seed=self.seed))

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        out["model"] = self.model.to_dict()
        out["loss"] = str(self.loss)
        out["augmentation"] = dataclasses.asdict(self.augmentation) if self.augmentation else None
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        values = dict(data)
        if "model" in values:
            values["model"] = ModelConfig.from_dict(values["model"])
        if "loss" in values:
            values["loss"] = LossKind.parse(values["loss"])
        if values.get("augmentation"):
            values["augmentation"] = Augmentation(**values["augmentation"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**values)


class Adam:
    """Adaptive-moment optimizer over float64 master parameters."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {p.name: np.zeros(p.shape) for p in self.params}
        self.v = {p.name: np.zeros(p.shape) for p in self.params}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = grads[p.name].astype(np.float64)
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        hyper = {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step_count}
        moments = {f"adam.m/{k}": v for k, v in self.m.items()}
        moments.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return hyper, moments

    def load_state(self, hyper: dict, moments: dict[str, np.ndarray]) -> None:
        self.step_count = int(hyper.get("step", 0))
        for name in self.m:
            if f"adam.m/{name}" in moments:
                self.m[name][...] = moments[f"adam.m/{name}"]
                self.v[name][...] = moments[f"adam.v/{name}"]


@dataclass
class TrainResult:
    model: CompletionNetwork
    checkpoint: Checkpoint
    log: list[tuple[int, float]]


def _stack(samples: list[Sample], attr: str) -> np.ndarray:
    arrays = [getattr(s, attr) for s in samples]
    sizes = {a.shape for a in arrays}
    if len(sizes) != 1:
        raise DataError(f"{attr} clouds in a batch must share one size, got {sorted(sizes)}")
    return np.stack(arrays)


def _augment(rng: np.random.Generator, aug: Augmentation | None, partial: np.ndarray, gt: np.ndarray):
    if aug is None:
        return partial, gt
    if aug.rotation_range > 0:
        angles = rng.uniform(-aug.rotation_range, aug.rotation_range, len(partial))
        c, s = np.cos(angles), np.sin(angles)
        rot = np.zeros((len(partial), 3, 3))
        rot[:, 0, 0], rot[:, 0, 1], rot[:, 1, 0], rot[:, 1, 1], rot[:, 2, 2] = c, -s, s, c, 1.0
        partial = partial @ np.swapaxes(rot, 1, 2)
        gt = gt @ np.swapaxes(rot, 1, 2)
    if aug.noise_sigma > 0:
        partial = partial + rng.normal(0.0, aug.noise_sigma, partial.shape)
    return partial, gt


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _make_checkpoint(model, config: TrainConfig, opt: Adam, epoch: int, rng, log) -> Checkpoint:
    hyper, moments = opt.state()
    return Checkpoint(
        model_config=model.config,
        params={name: p.data.copy() for name, p in model.named_parameters()},
        optimizer=hyper,
        moments={k: v.copy() for k, v in moments.items()},
        epoch=epoch,
        rng_state=_rng_state(rng),
        train_config=config.to_dict(),
        log=[[e, v] for e, v in log],
    )


def train(config: TrainConfig, samples: list[Sample], out_dir=None,
          on_epoch: Callable[[int, float], None] | None = None, resume: Checkpoint | None = None) -> TrainResult:
    """Minimize the configured loss over ``samples``.

    Per epoch the samples are shuffled and split into batches. Each sample
    keeps one FPS start index for the whole run. All randomness (weights,
    order, starts, augmentation) comes from ``config.seed``.
    The logged value is the mean per-sample loss computed before each update.
    Checkpoints go to ``out_dir/checkpoint`` at the end and to
    ``out_dir/checkpoint_eNNNN`` every ``checkpoint_every`` epochs.
    """
    samples = list(samples)
    if not samples:
        raise DataError("train: empty dataset")
    for s in samples:
        if s.partial.shape[0] != config.model.n_input:
            raise DataError(f"sample {s.id}: partial has {s.partial.shape[0]} points, model expects "
                            f"{config.model.n_input}")
    model = CompletionNetwork(config.model)
    params = model.parameters()
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    log: list[tuple[int, float]] = []
    first_epoch = 1
    if resume is not None:
        load_into(model, resume)
        opt.load_state(resume.optimizer, resume.moments)
        if resume.rng_state:
            rng.bit_generator.state = resume.rng_state
        log = [(int(e), float(v)) for e, v in resume.log]
        first_epoch = resume.epoch + 1

    out = Path(out_dir) if out_dir is not None else None
    n = len(samples)
    # one FPS start per sample for the whole run, drawn from its own stream so
    # resuming does not depend on it
    sample_starts = np.random.default_rng([config.seed, 1]).integers(0, config.model.n_input, n)
    for epoch in range(first_epoch, config.epochs + 1):
        order = rng.permutation(n)
        per_sample: list[float] = []
        for lo in range(0, n, config.batch_size):
            picked = order[lo:lo + config.batch_size]
            batch = [samples[i] for i in picked]
            partial, gt = _augment(rng, config.augmentation, _stack(batch, "partial"), _stack(batch, "gt"))
            starts = sample_starts[picked]
            tape = Tape(config.precision)
            result = model.forward(tape, partial, starts, starts)
            if config.loss.tag == "vanilla_cd":
                values = chamfer_distance_batch(gt, result.complete)
                loss = mean_all(values)
                per_sample.extend(float(v) for v in values.data)
            else:
                loss = batch_loss(config.loss, gt, result.complete)
                per_sample.extend([float(loss.data)] * len(batch))
            if not math.isfinite(float(loss.data)):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch starting {lo}")
            opt.step(tape.backward(loss, params))
        mean_loss = math.fsum(per_sample) / len(per_sample)
        log.append((epoch, mean_loss))
        logger.info("epoch %d mean train loss %.6g", epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
        if out is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(_make_checkpoint(model, config, opt, epoch, rng, log), out / f"checkpoint_e{epoch:04d}")

    ckpt = _make_checkpoint(model, config, opt, config.epochs, rng, log)
    if out is not None:
        save_checkpoint(ckpt, out / "checkpoint")
        lines = ["epoch,mean_train_loss"] + [f"{e},{v!r}" for e, v in log]
        atomic_write(out / "train_log.csv", "\n".join(lines) + "\n")
    return TrainResult(model, ckpt, log)


def model_from_checkpoint(ckpt: Checkpoint) -> CompletionNetwork:
    model = CompletionNetwork(ckpt.model_config)
    load_into(model, ckpt)
    return model
