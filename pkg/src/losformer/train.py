"""Mini-batch training loop with patience-based early stopping.

Each epoch shuffles the training set with a seeded generator, steps the
optimizer once per mini-batch, then measures a full validation loss.
Training stops when the validation loss has not reached a new minimum for
`patience` consecutive epochs (or at max_epochs), and the weights from
the best epoch are restored before returning.

`valid_loss_fn` exists so tests can drive the stopper with a scripted
loss sequence; production callers leave it None and get the real
eval-mode validation loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics
from .model import SequenceTransformer, collate


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float


class EarlyStopper:
    """Strict-minimum tracker: an epoch improves only if its validation
    loss is strictly below the best seen; ties count as stale."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, valid_loss: float) -> bool:
        if valid_loss < self.best:
            self.best = valid_loss
            self.best_epoch = epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def train_model(model: SequenceTransformer, train_seqs, valid_seqs,
                log_path=None, valid_loss_fn=None) -> list[EpochRecord]:
    """Train in place; returns the per-epoch log. See module docstring."""
    if not train_seqs or not valid_seqs:
        raise ValueError("training and validation splits must both be non-empty")
    cfg = model.cfg
    shuffle_rng = np.random.default_rng([cfg.seed, 101])
    dropout_rng = np.random.default_rng([cfg.seed, 211])
    stopper = EarlyStopper(cfg.patience)
    best_weights = model.snapshot()
    log: list[EpochRecord] = []

    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_seqs))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_seqs[i] for i in order[start:start + cfg.batch_size]]
            batch = collate(chunk)
            model.zero_grads()
            loss = model.train_step_loss(batch, dropout_rng)
            numerics.adam_step(
                model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
            total += loss * len(batch)
            count += len(batch)
        train_loss = total / count

        if valid_loss_fn is not None:
            valid_loss = float(valid_loss_fn(model, valid_seqs, epoch))
        else:
            valid_loss = model.eval_loss(valid_seqs)

        if stopper.update(epoch, valid_loss):
            best_weights = model.snapshot()
        log.append(EpochRecord(epoch=epoch, train_loss=train_loss, valid_loss=valid_loss))
        if stopper.should_stop:
            break

    model.restore(best_weights)
    if log_path is not None:
        save_log(log, log_path)
    return log


def save_log(log, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,valid_loss\n")
        for rec in log:
            fh.write(f"{rec.epoch},{rec.train_loss!r},{rec.valid_loss!r}\n")
