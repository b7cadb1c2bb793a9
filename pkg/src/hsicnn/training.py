"""Mini-batch SGD for HSI-CNN."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nn
from .data import PatchSource, SampleSet
from .errors import ConfigError, DimensionError, EmptySetError, UsageError
from .model import Model, backward, forward, predict_batched, save_checkpoint
from .nn import LayerParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    decay: float = 0.09
    batch_size: int = 100
    max_iterations: int = 7500
    seed: int = 0
    checkpoint_every: int = 0   # 0: only at the end (when a path is given)
    eval_every: int = 100       # 0: never evaluate during training

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0", stage="learning_rate")
        if self.decay < 0:
            raise ConfigError("decay must be >= 0", stage="decay")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", stage="batch_size")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1", stage="max_iterations")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ConfigError("checkpoint_every/eval_every must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Inverse-time decay: ``lr0 / (1 + decay * epoch)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.learning_rate / (1.0 + config.decay * epoch)


def sgd_update(params: dict, grads: dict, lr: float) -> dict:
    """Plain SGD step ``w - lr * g``; returns new parameter arrays."""
    if params.keys() != grads.keys():
        raise UsageError(f"gradient layers {sorted(grads)} != parameter layers {sorted(params)}")
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.weights.shape != p.weights.shape or g.biases.shape != p.biases.shape:
            raise UsageError(f"gradient shape mismatch for layer {name}")
        step = []
        for w, dw in ((p.weights, g.weights), (p.biases, g.biases)):
            new = np.multiply(dw, -lr, dtype=w.dtype)
            new += w
            step.append(new)
        out[name] = LayerParams(*step)
    return out


@dataclass
class TrainRecord:
    iteration: int
    loss: float
    train_acc: float
    test_acc: float


@dataclass
class TrainHistory:
    """Evaluation-point records plus the loss of every individual batch.

    ``loss`` and ``train_acc`` in a record summarize the batches since the
    previous record; ``test_acc`` is measured on the full held-out set.
    """

    records: list[TrainRecord] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loss", "train_acc", "test_acc"])
            for r in self.records:
                w.writerow([r.iteration, repr(r.loss), repr(r.train_acc), repr(r.test_acc)])


def epoch_length(n_train: int, batch_size: int) -> int:
    return math.ceil(n_train / batch_size)


def batch_schedule(n_train: int, batch_size: int, rng):
    """Yield ``(epoch, indices)`` forever; each epoch is one shuffled pass."""
    epoch = 0
    while True:
        perm = rng.permutation(n_train)
        for start in range(0, n_train, batch_size):
            yield epoch, perm[start:start + batch_size]
        epoch += 1


def accuracy(model: Model, samples: SampleSet, source: PatchSource) -> float:
    if len(samples) == 0:
        return float("nan")
    pred = predict_batched(model, source(samples.xs, samples.ys))
    return float(np.mean(pred == samples.classes))


def train(model: Model, train_samples: SampleSet, test_samples: SampleSet | None, cube,
          config: TrainConfig, checkpoint_path=None, callback=None):
    """Train a copy of ``model``; returns ``(trained model, TrainHistory)``.

    Each iteration takes the next ``batch_size`` samples of a per-epoch
    shuffle (seeded by ``config.seed``), averages the gradient over the batch
    and applies one SGD step at ``lr_at(config, epoch)``.

    ``callback(record, model)`` runs after every evaluation point; a truthy
    return value ends training early.
    """
    if len(train_samples) == 0:
        raise EmptySetError("training set is empty")
    cube = np.asarray(cube)
    if cube.shape[-1] != model.config.n_bands:
        raise DimensionError(f"cube has {cube.shape[-1]} bands, model expects "
                             f"{model.config.n_bands}", expected=model.config.n_bands,
                             actual=cube.shape[-1])
    if train_samples.classes.max() >= model.config.n_classes:
        raise DimensionError("training labels exceed the model's class count",
                             expected=model.config.n_classes,
                             actual=int(train_samples.classes.max()) + 1)

    model = model.copy()
    source = PatchSource(cube.astype(model.dtype, copy=False))
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    schedule = batch_schedule(len(train_samples), config.batch_size, rng)

    loss_sum = 0.0
    correct = seen = batches = 0
    for step in range(1, config.max_iterations + 1):
        epoch, idx = next(schedule)
        labels = train_samples.classes[idx]
        patches = source(train_samples.xs[idx], train_samples.ys[idx])
        probs, cache = forward(model, patches)
        losses, _ = nn.softmax_xent(cache["logits"], labels)
        grads, _ = backward(model, cache, labels)
        model.layers = sgd_update(model.layers, grads, lr_at(config, epoch))
        model.iteration += 1

        batch_loss = float(np.mean(losses))
        history.batch_losses.append(batch_loss)
        loss_sum += batch_loss
        batches += 1
        correct += int(np.sum(np.argmax(probs, axis=-1) == labels))
        seen += len(idx)

        last = step == config.max_iterations
        if (config.eval_every and step % config.eval_every == 0) or last:
            test_acc = accuracy(model, test_samples, source) if test_samples is not None \
                else float("nan")
            rec = TrainRecord(model.iteration, loss_sum / batches, correct / seen, test_acc)
            history.records.append(rec)
            log.info("iter %d  epoch %d  loss %.4f  train %.4f  test %.4f",
                     rec.iteration, epoch, rec.loss, rec.train_acc, rec.test_acc)
            stop = callback is not None and callback(rec, model)
            loss_sum = 0.0
            correct = seen = batches = 0
            if stop:
                last = True
        if checkpoint_path is not None and (
                last or (config.checkpoint_every and step % config.checkpoint_every == 0)):
            save_checkpoint(model, checkpoint_path)
        if last:
            break
    return model, history
