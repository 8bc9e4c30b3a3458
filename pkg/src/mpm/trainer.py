"""Pointwise BCE training with Adam and early stopping on validation HR@10."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import TAG_DROPOUT, TAG_SHUFFLE, ExampleSet, SplitDataset, build_training_examples, substream
from .evaluation import evaluate
from .model import MpmConfig, Params, init_params, predict

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 1024
    max_epochs: int = 30
    patience: int = 5
    train_negatives: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_hr10: float
    val_ndcg10: float
    wall_clock_s: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch - 1]

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "epochs": [asdict(e) for e in self.epochs],
        }


def loss_on_batch(
    kind: str,
    batch: ExampleSet,
    params: Params,
    config: MpmConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> ad.Tensor:
    """Mean binary cross-entropy of the model over ``batch``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    scores = predict(kind, params, config, batch.users, batch.histories, batch.targets, training, rng)
    return ad.bce_loss(scores, batch.labels)


def _snapshot(params: Params) -> dict[str, np.ndarray]:
    return {n: t.data.copy() for n, t in params.items()}


def train(
    kind: str,
    split: SplitDataset,
    config: MpmConfig,
    train_config: TrainConfig,
    params: Params | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[Params, TrainReport]:
    """Train ``kind`` and return the parameters of the best validation epoch.

    Negatives, shuffling and dropout each draw from a substream keyed by
    (seed, purpose, epoch), so epochs do not depend on ``max_epochs``.
    """
    train_config.validate()
    config.validate(kind)
    seed = train_config.seed
    if params is None:
        params = init_params(kind, config, split.num_users, split.num_items, seed)
    names = list(params)
    states = {
        n: ad.AdamState.for_param(
            params[n],
            lr=train_config.learning_rate,
            beta1=train_config.beta1,
            beta2=train_config.beta2,
            eps=train_config.epsilon,
        )
        for n in names
    }
    report = TrainReport()
    best_hr = -math.inf
    best = _snapshot(params)
    stale = 0
    bs = train_config.batch_size

    for epoch in range(1, train_config.max_epochs + 1):
        t0 = time.perf_counter()
        examples = build_training_examples(split, config.history_size, train_config.train_negatives, seed, epoch)
        if len(examples) == 0:
            raise ValueError("no training examples; lists are shorter than the history size")
        order = substream(seed, TAG_SHUFFLE, epoch).permutation(len(examples))
        drop_rng = substream(seed, TAG_DROPOUT, epoch)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(examples), bs)):
            batch = examples.take(order[start:start + bs])
            with ad.Tape() as tape:
                loss = loss_on_batch(kind, batch, params, config, training=True, rng=drop_rng)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, b, value)
            ad.backward(loss, tape)
            for n in names:
                p = params[n]
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                ad.adam_update(p, states[n])
                p.grad = None
            total += value * len(batch)
            count += len(batch)

        summary = evaluate(kind, params, split, "validation", config, ks=(10,))
        record = EpochRecord(
            epoch, total / count, summary.hr[10], summary.ndcg[10], round(time.perf_counter() - t0, 3)
        )
        report.epochs.append(record)
        logger.info(
            "epoch %d loss %.5f val HR@10 %.4f NDCG@10 %.4f (%.1fs)",
            epoch, record.loss, record.val_hr10, record.val_ndcg10, record.wall_clock_s,
        )
        if on_epoch is not None:
            on_epoch(record)
        if record.val_hr10 > best_hr:
            best_hr = record.val_hr10
            report.best_epoch = epoch
            best = _snapshot(params)
            stale = 0
        else:
            stale += 1
            if stale >= train_config.patience:
                report.stopped_early = True
                break

    for n, arr in best.items():
        params[n].data = arr
    return params, report
