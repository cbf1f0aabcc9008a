"""Joint optimization of both branches: identity loss plus weighted style
loss over platform-balanced batches, SGD with momentum, staircase learning
rate decay, and the two-group rates (classifiers and modulation convs run
ten times hotter than the backbone).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from . import weather as W
from .dataset import Batch, SyntheticDataset, load_training_batch
from .errors import NumericalError, UsageError
from .model import Mode, ModelConfig, MuSeNet, build_model, forward, save_checkpoint
from .tensor import LrGroup


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_per_platform: int = 8
    base_lr: float = 0.0005
    boosted_lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    decay_epochs: tuple = (35, 50)
    decay_factor: float = 0.1
    loss_weight_style: float = 1.0
    seed: int = W.DEFAULT_SEED

    def validate(self):
        if self.epochs < 1 or self.batch_per_platform < 1:
            raise UsageError("epochs and batch size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise UsageError(f"momentum must lie in [0,1), got {self.momentum}")
        if min(self.base_lr, self.boosted_lr) <= 0 or self.weight_decay < 0:
            raise UsageError("learning rates must be positive, weight decay non-negative")
        return self


@dataclass
class LossBundle:
    l_style: float
    l_id: float
    l_total: float


def lr_at(epoch: int, config: TrainConfig) -> tuple[float, float]:
    """Piecewise-constant staircase: multiply by decay_factor at each milestone."""
    if not 0 <= epoch < config.epochs:
        raise UsageError(f"epoch {epoch} outside [0, {config.epochs})")
    factor = config.decay_factor ** sum(epoch >= m for m in config.decay_epochs)
    return config.base_lr * factor, config.boosted_lr * factor


def compute_losses(model: MuSeNet, batch: Batch, loss_weight_style: float,
                   rng: np.random.Generator):
    """Forward the combined 2N batch and compose l_id + weight * l_style."""
    out = forward(model, batch.images, Mode.TRAIN, rng)
    l_style = T.softmax_cross_entropy(out.style_logits, batch.style_labels)
    l_id = T.softmax_cross_entropy(out.id_logits, batch.identity_labels)
    l_total = T.add(l_id, T.scale(l_style, loss_weight_style))
    bundle = LossBundle(float(l_style.data), float(l_id.data), float(l_total.data))
    return bundle, l_total


def _lr_groups(model: MuSeNet):
    params = model.parameters()
    base = [p for p in params if p.lr_group is LrGroup.BASE]
    boosted = [p for p in params if p.lr_group is LrGroup.BOOSTED]
    return base, boosted


def train_step(model: MuSeNet, batch: Batch, config: TrainConfig,
               lr_base: float, lr_boosted: float, rng: np.random.Generator,
               groups=None) -> LossBundle:
    bundle, l_total = compute_losses(model, batch, config.loss_weight_style, rng)
    T.backward(l_total)
    base, boosted = groups if groups is not None else _lr_groups(model)
    T.sgd_step(base, lr_base, config.momentum, config.weight_decay)
    T.sgd_step(boosted, lr_boosted, config.momentum, config.weight_decay)
    return bundle


def steps_per_epoch(dataset: SyntheticDataset, config: TrainConfig) -> int:
    return (len(dataset.train_ids) * dataset.views_per_id) // config.batch_per_platform


def train(dataset: SyntheticDataset, config: TrainConfig, model_config: ModelConfig,
          out_dir, verbose: bool = False) -> tuple[Path, Path, MuSeNet]:
    """Full run: returns (checkpoint path, log path, trained model).

    The identity-classifier width always tracks the dataset, so the provided
    model config's num_identities is overridden.
    """
    config.validate()
    model_config = replace(model_config, num_identities=len(dataset.train_ids))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = build_model(model_config, np.random.default_rng(
        np.random.SeedSequence([config.seed, 1])))
    groups = _lr_groups(model)
    steps = steps_per_epoch(dataset, config)
    if steps < 1:
        raise UsageError("dataset too small for the configured batch size")

    log_rows = []
    t_start = time.perf_counter()
    with T.blas_single_thread():
        for epoch in range(config.epochs):
            lr_base, lr_boosted = lr_at(epoch, config)
            sums = np.zeros(3)
            for step in range(steps):
                batch = load_training_batch(
                    dataset, config.batch_per_platform, epoch, step, config.seed)
                rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, epoch, step]))
                try:
                    bundle = train_step(model, batch, config, lr_base, lr_boosted, rng, groups)
                except NumericalError as exc:
                    raise NumericalError(f"epoch {epoch} step {step}: {exc}") from exc
                sums += (bundle.l_style, bundle.l_id, bundle.l_total)
            means = sums / steps
            log_rows.append((epoch, means[0], means[1], means[2], lr_base, lr_boosted))
            if verbose:
                print(f"epoch {epoch:3d}  l_style {means[0]:.4f}  l_id {means[1]:.4f}  "
                      f"l_total {means[2]:.4f}  ({time.perf_counter() - t_start:.1f}s)")

    ckpt_path = out_dir / "model.ckpt"
    log_path = out_dir / "train_log.tsv"
    save_checkpoint(model, ckpt_path)
    with open(log_path, "w", encoding="ascii") as fh:
        fh.write("epoch\tl_style\tl_id\tl_total\tlr_base\tlr_boosted\n")
        for row in log_rows:
            fh.write(f"{row[0]}\t{row[1]:.6f}\t{row[2]:.6f}\t{row[3]:.6f}\t"
                     f"{row[4]:.6g}\t{row[5]:.6g}\n")
    return ckpt_path, log_path, model
