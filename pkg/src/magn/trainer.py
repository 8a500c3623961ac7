"""Adam training on randomly cropped, degraded-on-the-fly image pairs."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .degrade import DegradeSpec, degrade, derive_seed
from .imageio import list_pngs, read_png, to_channels
from .model import ModelConfig, as_tensors, forward, init_params, mse_loss
from .tensor import GradTape, Tensor, add, backward

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "NonFiniteGradient",
    "DatasetError",
    "adam_step",
    "Trainer",
    "TrainResult",
    "load_images",
    "train",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 200
    steps: int = 0  # > 0 overrides epochs
    crop: int = 31
    seed: int = 0
    degrade: str = "gaussian"
    sigma: float = 25.0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    augment: bool = False
    log_every: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1 or self.crop < 1:
            raise ValueError("batch_size and crop must be positive")
        DegradeSpec(self.degrade, self.sigma, self.seed)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small-scale defaults for CPU runs."""
        return replace(cls(batch_size=8, epochs=1, steps=200, lr=1e-3), **overrides)

    @property
    def degrade_spec(self) -> DegradeSpec:
        return DegradeSpec(self.degrade, self.sigma, self.seed)

    def total_steps(self, n_images: int) -> int:
        if self.steps > 0:
            return self.steps
        return self.epochs * math.ceil(n_images / self.batch_size)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name}")
        self.name = name


def adam_step(params, grads, state: OptimizerState, config: TrainConfig):
    """One bias-corrected Adam update, in place.  Returns ``(params, state)``.

    The whole step is rejected, leaving everything untouched, if any
    gradient is non-finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    if not state.m:
        fresh = OptimizerState.zeros_like(params)
        state.m, state.v = fresh.m, fresh.v
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (config.lr / bc1) * m / (np.sqrt(v / bc2) + config.adam_eps)
    return params, state


class DatasetError(ValueError):
    pass


def load_images(directory, channels: int, min_size: int = 1) -> list[np.ndarray]:
    """Read every PNG in ``directory``; unreadable or too-small files are skipped."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory {directory} does not exist")
    images = []
    for path in list_pngs(directory):
        try:
            img = to_channels(read_png(path), channels)
        except Exception as exc:
            log.warning("skipping %s: %s", path.name, exc)
            continue
        if min(img.shape[:2]) < min_size:
            log.warning("skipping %s: smaller than the %d px crop", path.name, min_size)
            continue
        images.append(img)
    if not images:
        raise DatasetError(f"no usable images in {directory}")
    return images


@dataclass
class TrainResult:
    losses: list[float]
    checkpoints: list[Path]


class Trainer:
    """Holds parameters and optimizer state; batches are a pure function of
    ``(seed, step)`` so interrupted runs resume exactly."""

    def __init__(
        self,
        model: ModelConfig,
        config: TrainConfig,
        images: list[np.ndarray],
        params: dict[str, np.ndarray] | None = None,
        state: OptimizerState | None = None,
    ):
        model.check_size(config.crop, config.crop)
        if not images:
            raise ValueError("empty dataset")
        self.model = model
        self.config = config
        self.images = [np.asarray(to_channels(im, model.in_channels), dtype=model.dtype) for im in images]
        for im in self.images:
            if min(im.shape[:2]) < config.crop + (config.degrade == "mosaic"):
                raise ValueError(f"image of shape {im.shape} is smaller than crop {config.crop}")
        self.params = params if params is not None else init_params(model, config.seed)
        self.state = state or OptimizerState.zeros_like(self.params)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, images, config: TrainConfig | None = None) -> "Trainer":
        config = config or ckpt.train
        if ckpt.opt_m is not None:
            state = OptimizerState(ckpt.opt_m, ckpt.opt_v, ckpt.step)
        else:
            state = OptimizerState.zeros_like(ckpt.params)
            state.step = ckpt.step
        return cls(ckpt.model, config, images, ckpt.params, state)

    @property
    def step(self) -> int:
        return self.state.step

    def sample_batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """Degraded and clean crops ``(B, crop, crop, C)`` for ``step``."""
        cfg = self.config
        rng = derive_seed(cfg.seed, step)
        c = cfg.crop
        # mosaicking needs an even-sized, even-aligned region
        span = c + (c % 2) if cfg.degrade == "mosaic" else c
        noisy, clean = [], []
        for _ in range(cfg.batch_size):
            img = self.images[rng.integers(len(self.images))]
            H, W = img.shape[:2]
            i = int(rng.integers(H - span + 1))
            j = int(rng.integers(W - span + 1))
            if cfg.degrade == "mosaic":
                i, j = i - i % 2, j - j % 2
            patch = img[i : i + span, j : j + span]
            if cfg.augment:
                patch = np.rot90(patch, int(rng.integers(4)))
                if rng.integers(2):
                    patch = patch[:, ::-1]
            patch = np.ascontiguousarray(patch)
            bad = degrade(patch, cfg.degrade_spec, rng).astype(patch.dtype)
            noisy.append(bad[:c, :c])
            clean.append(patch[:c, :c])
        return np.stack(noisy), np.stack(clean)

    def loss_and_grads(self, noisy: np.ndarray, clean: np.ndarray):
        pt = as_tensors(self.params, requires_grad=True)
        x = Tensor(noisy)
        with GradTape() as tape:
            pred = add(x, forward(x, pt, self.model))
            loss = mse_loss(pred, clean)
        grads = backward(tape, loss)
        return loss.item(), {k: grads[t] for k, t in pt.items()}

    def train_step(self) -> float:
        noisy, clean = self.sample_batch(self.state.step)
        loss, grads = self.loss_and_grads(noisy, clean)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {self.state.step}")
        adam_step(self.params, grads, self.state, self.config)
        return loss

    def save(self, path) -> Path:
        return save_checkpoint(
            path, self.model, self.params, self.config, self.state.m, self.state.v, self.state.step
        )

    def run(
        self,
        steps: int,
        out_dir=None,
        on_step: Callable[[int, float, float], None] | None = None,
    ) -> TrainResult:
        """Run ``steps`` more steps, checkpointing into ``out_dir`` if given."""
        losses, saved = [], []
        every = self.config.checkpoint_every
        start = time.perf_counter()
        target = self.state.step + steps
        while self.state.step < target:
            loss = self.train_step()
            losses.append(loss)
            if on_step is not None:
                on_step(self.state.step, loss, time.perf_counter() - start)
            if out_dir is not None and every and self.state.step % every == 0:
                saved.append(self.save(Path(out_dir) / f"ckpt_{self.state.step:06d}.magn"))
        if out_dir is not None:
            saved.append(self.save(Path(out_dir) / "last.magn"))
        return TrainResult(losses, saved)


def train(
    model: ModelConfig,
    config: TrainConfig,
    data_dir,
    out_dir,
    resume: Checkpoint | None = None,
    log_file: str | None = "train.log",
) -> TrainResult:
    """Train on the PNGs in ``data_dir``; writes checkpoints and a text log."""
    images = load_images(data_dir, model.in_channels, config.crop)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer.from_checkpoint(resume, images, config) if resume else Trainer(model, config, images)
    total = config.total_steps(len(images))
    lines = []

    def on_step(step, loss, elapsed):
        line = f"step={step} loss={loss:.6g} lr={config.lr:g} elapsed={elapsed:.2f}"
        lines.append(line)
        if step % max(1, config.log_every) == 0 or step == total:
            log.info(line)

    result = trainer.run(max(0, total - trainer.step), out_dir, on_step)
    if log_file:
        with open(out_dir / log_file, "a") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
    return result
