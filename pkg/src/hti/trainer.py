"""Mini-batch training loop with Adam, early stopping, and checkpoints.

Each epoch shuffles the training interactions, assembles leave-target-out
example batches, runs forward/backward, clips the global gradient norm,
and applies an Adam update.  Validation MAE is monitored after every
epoch; the best parameters are kept and training stops after ``patience``
epochs without improvement.  A non-finite loss aborts training and the
last good checkpoint is returned.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import DataError, assemble_batch
from .model import HTIModel, HyperParams

logger = logging.getLogger(__name__)


class NumericalError(Exception):
    """Raised when training or prediction produces non-finite values."""


@dataclass
class AdamState:
    """First/second moment accumulators and step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure(self, tape):
        for name, t in tape.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(t.data)
                self.v[name] = np.zeros_like(t.data)


def adam_step(tape, state, learning_rate):
    """Standard Adam update with bias correction; skips gradient-free params."""
    state.ensure(tape)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, t in tape.items():
        g = t.grad
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        t.data -= learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainingLog:
    """Per-epoch records: {epoch, train_loss, val_mae, val_rmse, wall_seconds}."""

    records: list = field(default_factory=list)

    def append(self, **kv):
        self.records.append(kv)

    def write_ndjson(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    model: HTIModel
    log: TrainingLog
    best_epoch: int
    best_val_mae: float
    diverged: bool = False


def _epoch_batches(order, batch_size):
    for lo in range(0, len(order), batch_size):
        yield order[lo : lo + batch_size]


def train(corpus, hyper: HyperParams, variant="full", embeddings=None, eval_fn=None,
          verbose=False):
    """Train a model on the corpus train split, early-stopping on val MAE.

    ``eval_fn(model, split)`` may be injected (defaults to
    evaluator.evaluate); it must return an object with ``mae``/``rmse``.
    """
    from . import evaluator  # local import to avoid a module cycle

    hyper.validate()
    train_ids = corpus.split_indices("train")
    val_ids = corpus.split_indices("val")
    if not train_ids or not val_ids:
        raise DataError("corpus needs nonempty train and val splits")
    eval_fn = eval_fn or (lambda m, split: evaluator.evaluate(m, corpus, split))

    model = HTIModel(corpus.n_users, corpus.n_items, len(corpus.vocabulary), hyper,
                     variant=variant, embeddings=embeddings)
    model.enforce_pad_row()
    shuffle_rng = np.random.default_rng(hyper.seed + 1)
    adam = AdamState()
    log = TrainingLog()

    best_state = model.tape.state_dict()
    best_val = np.inf
    best_epoch = 0
    epochs_since_best = 0
    diverged = False

    for epoch in range(1, hyper.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_ids))
        losses = []
        try:
            for rows in _epoch_batches(order, hyper.batch_size):
                batch = assemble_batch(corpus, [train_ids[i] for i in rows])
                model.tape.zero_grad()
                loss = model.loss(batch, train=True)
                if not np.isfinite(loss.data):
                    raise NumericalError(f"non-finite loss at epoch {epoch}")
                loss.backward()
                if hyper.grad_clip > 0:
                    model.tape.clip_global_norm(hyper.grad_clip)
                grad = model.tape["embed.W_e"].grad
                if grad is not None:
                    grad[0] = 0.0  # pad row stays frozen
                adam_step(model.tape, adam, hyper.learning_rate)
                model.enforce_pad_row()
                losses.append(float(loss.item()))
        except (NumericalError, FloatingPointError) as e:
            logger.error("training diverged: %s; restoring best checkpoint", e)
            diverged = True
            model.tape.load_state_dict(best_state)
            break

        metrics = eval_fn(model, "val")
        wall = time.perf_counter() - t0
        log.append(epoch=epoch, train_loss=float(np.mean(losses)), val_mae=float(metrics.mae),
                   val_rmse=float(metrics.rmse), wall_seconds=wall)
        if verbose:
            logger.info("epoch %d loss %.4f val_mae %.4f (%.1fs)", epoch,
                        float(np.mean(losses)), metrics.mae, wall)
        if metrics.mae < best_val:
            best_val = float(metrics.mae)
            best_epoch = epoch
            best_state = model.tape.state_dict()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= hyper.patience:
                break

    model.tape.load_state_dict(best_state)
    return TrainResult(model=model, log=log, best_epoch=best_epoch, best_val_mae=best_val,
                       diverged=diverged)
