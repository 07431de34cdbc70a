"""Full-batch centralized training loop.

Federated clients reuse ``run_epochs`` with an epoch offset, so a
single-client run and a centralized run walk the exact same sequence of
forward seeds and optimizer steps.
"""

from dataclasses import dataclass
from time import perf_counter

import numpy as np

from .autodiff import backward
from .errors import ConfigError
from .graphs import GraphDataset
from .model import ModelConfig, forward, init_params, loss_and_metrics
from .optim import AdamConfig, OptimizerState, ParamSet, adam_step, init_optimizer
from .seeding import DROPOUT, derive_seed
from .spectral import SpectralBasis


@dataclass(frozen=True)
class EpochRecord:
    """One optimizer step; loss/accuracy are measured before the step."""

    epoch: int
    loss: float
    accuracy: float
    seconds: float


@dataclass(frozen=True)
class CentralRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    seconds: float


def run_epochs(
    dataset: GraphDataset,
    basis: SpectralBasis,
    config: ModelConfig,
    params: ParamSet,
    state: OptimizerState,
    n_epochs: int,
    seed: int,
    epoch_offset: int = 0,
) -> list[EpochRecord]:
    """Advance ``params`` in place by ``n_epochs`` full-batch steps.

    The dropout stream for epoch ``e`` depends only on (seed, e), never
    on how the epochs are batched into calls.
    """
    records = []
    for j in range(n_epochs):
        epoch = epoch_offset + j
        start = perf_counter()
        logits, _ = forward(
            dataset,
            basis,
            config,
            params,
            training=True,
            dropout_seed=derive_seed(seed, DROPOUT, epoch),
        )
        loss, accuracy = loss_and_metrics(logits, dataset.labels, dataset.train_mask)
        grads = backward(loss, dict(params.items()))
        adam_step(params, grads, state)
        records.append(
            EpochRecord(epoch, loss.item(), accuracy, perf_counter() - start)
        )
    return records


def evaluate(
    dataset: GraphDataset,
    basis: SpectralBasis,
    config: ModelConfig,
    params: ParamSet,
    mask: np.ndarray,
) -> tuple[float, float]:
    """Loss and accuracy on ``mask`` with dropout disabled."""
    logits, _ = forward(dataset, basis, config, params, training=False)
    loss, accuracy = loss_and_metrics(logits, dataset.labels, mask)
    return loss.item(), accuracy


def train_centralized(
    dataset: GraphDataset,
    basis: SpectralBasis,
    config: ModelConfig,
    optimizer: AdamConfig,
    epochs: int,
    seed: int,
    patience: int | None = None,
) -> tuple[ParamSet, list[CentralRecord]]:
    """Train from a fresh initialization, returning params and history.

    With ``patience`` set and a nonempty validation mask, training stops
    once validation accuracy has not improved for that many consecutive
    epochs, and the best-validation parameters are restored.
    """
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if patience is not None and patience < 1:
        raise ConfigError("patience must be >= 1")

    params = init_params(config, seed)
    state = init_optimizer(params, optimizer)
    has_val = bool(dataset.val_mask.any())
    track_best = patience is not None and has_val

    history: list[CentralRecord] = []
    best_accuracy = -1.0
    best_params = None
    stale = 0
    for epoch in range(epochs):
        record = run_epochs(dataset, basis, config, params, state, 1, seed, epoch)[0]
        if has_val:
            val_loss, val_accuracy = evaluate(
                dataset, basis, config, params, dataset.val_mask
            )
        else:
            val_loss = val_accuracy = float("nan")
        history.append(
            CentralRecord(
                epoch,
                record.loss,
                record.accuracy,
                val_loss,
                val_accuracy,
                record.seconds,
            )
        )
        if track_best:
            if val_accuracy > best_accuracy:
                best_accuracy = val_accuracy
                best_params = params.copy()
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break
    if track_best and best_params is not None:
        params = best_params
    return params, history
