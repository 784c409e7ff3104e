"""Focal-loss training with Adadelta and early stopping."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .model import LesionNet, forward, save_weights
from .sampling import PatchSet

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    alpha: tuple[float, ...] = (0.25, 0.75)

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        alpha = tuple(float(a) for a in self.alpha)
        if any(a <= 0 for a in alpha):
            raise ValueError("class weights must be > 0")
        object.__setattr__(self, "alpha", alpha)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    patience: int = 8
    max_epochs: int = 200
    rho: float = 0.95
    eps: float = 1e-6
    checkpoint_path: str | None = None
    seed: int = 0
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")
        if not 0 < self.rho < 1 or self.eps <= 0:
            raise ValueError("rho must lie in (0, 1) and eps be > 0")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_l1: list[float] = field(default_factory=list)
    val_error_rate: list[float] = field(default_factory=list)
    monitored: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_l1", "val_error_rate", "monitored", "best"])
            for i, row in enumerate(zip(self.train_loss, self.val_l1, self.val_error_rate, self.monitored)):
                writer.writerow([i, *(repr(float(v)) for v in row), int(i == self.best_epoch)])


def focal_loss(probabilities: torch.Tensor, targets: torch.Tensor, config: FocalConfig | None = None) -> torch.Tensor:
    """Mean over voxels of ``-alpha_t (1 - p_t)^gamma log(p_t)``.

    ``probabilities`` and one-hot ``targets`` are (B, N, ...) tensors with the
    class axis at dimension 1.
    """
    config = config or FocalConfig()
    probabilities = torch.as_tensor(probabilities)
    targets = torch.as_tensor(targets, dtype=probabilities.dtype)
    if probabilities.shape != targets.shape:
        raise ValueError(f"shape mismatch: probabilities {tuple(probabilities.shape)} vs targets {tuple(targets.shape)}")
    n_classes = probabilities.shape[1]
    if len(config.alpha) != n_classes:
        raise ValueError(f"{len(config.alpha)} class weights for {n_classes} classes")
    view = (1, n_classes) + (1,) * (probabilities.ndim - 2)
    alpha = torch.tensor(config.alpha, dtype=probabilities.dtype).view(view)
    p_t = (probabilities * targets).sum(dim=1).clamp(PROB_EPS, 1.0 - PROB_EPS)
    alpha_t = (alpha * targets).sum(dim=1)
    loss = -alpha_t * (1.0 - p_t) ** config.gamma * torch.log(p_t)
    return loss.mean()


def _predict_batches(network, xs: np.ndarray, batch_size: int):
    for start in range(0, len(xs), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(xs[start:start + batch_size]))
        yield start, forward(network, x.to(memory_format=torch.channels_last_3d), "eval")


def validation_metric(network, validation: PatchSet, batch_size: int = 64) -> tuple[float, float, float]:
    """(mean L1, voxel error rate, their sum) over the validation patches."""
    xs, ys = validation.val_x, validation.val_y
    if len(xs) == 0:
        raise TrainingError("validation set is empty")
    l1_sum = 0.0
    errors = 0
    for start, probs in _predict_batches(network, xs, batch_size):
        y = torch.from_numpy(ys[start:start + len(probs)].astype(np.float32))
        l1_sum += float((probs.double() - y.double()).abs().sum())
        # argmax picks the lowest index on ties, i.e. healthy
        errors += int((probs.argmax(dim=1) != y.argmax(dim=1)).sum())
    n_elements = ys.size
    n_voxels = ys.size // ys.shape[1]
    l1 = l1_sum / n_elements
    error_rate = errors / n_voxels
    return l1, error_rate, l1 + error_rate


def train(
    network: LesionNet,
    patches: PatchSet,
    train_config: TrainConfig | None = None,
    focal_config: FocalConfig | None = None,
    metric_fn: Callable | None = None,
) -> tuple[LesionNet, TrainHistory]:
    """Train until the monitored metric stalls for ``patience`` epochs.

    Returns the network restored to its best-epoch weights.  ``metric_fn``
    replaces :func:`validation_metric` (same signature); tests use it to
    script the monitored series.
    """
    train_config = train_config or TrainConfig()
    focal_config = focal_config or FocalConfig()
    metric_fn = metric_fn or (lambda net, ps: validation_metric(net, ps, train_config.eval_batch_size))
    n = len(patches.train_x)
    if n == 0:
        raise TrainingError("training set is empty")
    if len(patches.val_x) == 0:
        raise TrainingError("validation set is empty")

    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    network = network.to(memory_format=torch.channels_last_3d)
    # lr=1 is the plain Adadelta rule, with no learning rate to tune
    optimizer = torch.optim.Adadelta(network.parameters(), lr=1.0, rho=train_config.rho, eps=train_config.eps)
    history = TrainHistory()
    best_state = None
    best_metric = math.inf
    since_best = 0
    for epoch in range(train_config.max_epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, train_config.batch_size)):
            idx = np.sort(order[start:start + train_config.batch_size])
            x = torch.from_numpy(patches.train_x[idx]).to(memory_format=torch.channels_last_3d)
            y = torch.from_numpy(patches.train_y[idx].astype(np.float32))
            probs = forward(network, x, "train")
            loss = focal_loss(probs, y, focal_config)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {float(loss.detach())} at epoch {epoch}, batch {b}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        l1, err, monitored = metric_fn(network, patches)
        history.train_loss.append(total / seen)
        history.val_l1.append(float(l1))
        history.val_error_rate.append(float(err))
        history.monitored.append(float(monitored))
        logger.info("epoch %d: loss %.5f val_l1 %.5f val_err %.5f monitored %.5f",
                    epoch, total / seen, l1, err, monitored)
        if monitored < best_metric:
            best_metric = monitored
            history.best_epoch = epoch
            best_state = copy.deepcopy(network.state_dict())
            since_best = 0
            if train_config.checkpoint_path:
                save_weights(network, train_config.checkpoint_path, extra={"epoch": epoch})
        else:
            since_best += 1
            if since_best >= train_config.patience:
                history.stopped_early = True
                break
    network.load_state_dict(best_state)
    return network, history
