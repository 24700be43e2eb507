"""SGD training loop, evaluation, and the metrics stream.

The optimizer is plain SGD with momentum and decoupled-from-nothing weight
decay folded into the gradient (g' = g + wd*w), with an optional step
learning-rate decay.  Every source of randomness (shuffling, dropout
masks) derives from the config seed through named substreams, so a run's
metrics are a pure function of (graph init seed, data, config); repeated
runs match bit for bit, except the wall-time column.

Metrics go to an in-memory record list, optionally mirrored to a CSV
stream (one row per epoch, appended as training progresses) and a final
JSON summary.
"""

import json
import time
from dataclasses import dataclass

import numpy as np

from .layers import softmax_cross_entropy
from .tensor import NonFiniteError, Rng, ShapeError

CSV_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc,wall_time_s"


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class StepDecay:
    """Multiply the learning rate by ``factor`` every ``every`` epochs."""

    every: int = 30
    factor: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: StepDecay = StepDecay()
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        # lr = 0 is legal: a zero-rate run is the contract for "training is a
        # no-op on parameters" checks
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def lr_at(self, epoch):
        """Learning rate for a 0-based epoch index."""
        if self.lr_decay is None:
            return self.lr
        return self.lr * self.lr_decay.factor ** (epoch // self.lr_decay.every)

    def to_dict(self):
        d = {"epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
             "momentum": self.momentum, "weight_decay": self.weight_decay,
             "seed": self.seed}
        if self.lr_decay is None:
            d["lr_decay"] = {"kind": "none"}
        else:
            d["lr_decay"] = {"kind": "step", "every": self.lr_decay.every,
                             "factor": self.lr_decay.factor}
        return d

    @classmethod
    def from_dict(cls, d):
        decay = d.get("lr_decay", {"kind": "step", "every": 30, "factor": 0.1})
        if decay.get("kind") == "none":
            lr_decay = None
        else:
            lr_decay = StepDecay(int(decay.get("every", 30)),
                                 float(decay.get("factor", 0.1)))
        return cls(epochs=int(d.get("epochs", 10)),
                   batch_size=int(d.get("batch_size", 32)),
                   lr=float(d.get("lr", 0.01)),
                   momentum=float(d.get("momentum", 0.9)),
                   weight_decay=float(d.get("weight_decay", 1e-4)),
                   lr_decay=lr_decay,
                   seed=int(d.get("seed", 0)))


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    wall_time_s: float

    def csv_row(self):
        return ",".join([str(self.epoch),
                         repr(self.train_loss), repr(self.train_accuracy),
                         repr(self.val_loss), repr(self.val_accuracy),
                         repr(self.wall_time_s)])


def sgd_step(param, grad, velocity, lr, momentum, weight_decay):
    """One momentum-SGD update; returns ``(new_param, new_velocity)``.

    g' = g + weight_decay * w;  v <- momentum * v - lr * g';  w <- w + v.
    Pure: inputs are not modified.
    """
    param = np.asarray(param)
    grad = np.asarray(grad)
    velocity = np.asarray(velocity)
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ShapeError(f"sgd_step shapes differ: param {param.shape}, "
                         f"grad {grad.shape}, velocity {velocity.shape}")
    g = grad + param.dtype.type(weight_decay) * param
    new_velocity = param.dtype.type(momentum) * velocity - param.dtype.type(lr) * g
    new_param = param + new_velocity
    if not (np.all(np.isfinite(new_param)) and np.all(np.isfinite(new_velocity))):
        raise NonFiniteError("sgd_step produced a non-finite update")
    return new_param, new_velocity


class SgdOptimizer:
    """Momentum-SGD over a graph's trainable parameters.

    Parameters named in ``graph.frozen`` are skipped entirely: their
    gradients are discarded and their velocity never accumulates.
    """

    def __init__(self, graph, momentum, weight_decay):
        self.graph = graph
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {}
        params = graph.named_params()
        for name in graph.trainable_names():
            self.velocity[name] = np.zeros_like(params[name])

    def step(self, lr):
        grads = self.graph.named_grads()
        for name in self.graph.trainable_names():
            if name in self.graph.frozen:
                continue
            grad = grads[name]
            if grad is None:
                raise RuntimeError(f"no gradient for {name}; run backward first")
            node_name, _, key = name.rpartition(".")
            layer = self.graph.node(node_name).layer
            layer.params[key], self.velocity[name] = sgd_step(
                layer.params[key], grad, self.velocity[name],
                lr, self.momentum, self.weight_decay,
            )


def _dataset_arrays(dataset):
    """Accept a Dataset or a plain (images, labels) pair."""
    if hasattr(dataset, "arrays"):
        return dataset.arrays()
    images, labels = dataset
    return np.asarray(images), np.asarray(labels)


def _check_classes(dataset, expected, name):
    if hasattr(dataset, "class_names"):
        k = len(dataset.class_names)
        if k != expected:
            raise ValueError(f"{name} set has {k} classes but the graph head "
                             f"expects {expected}")
    else:
        _, labels = _dataset_arrays(dataset)
        if labels.size and int(np.max(labels)) + 1 > expected:
            raise ValueError(f"{name} set has labels beyond the graph head's "
                             f"{expected} classes")


def train(graph, train_set, val_set, config, csv_path=None, json_path=None,
          log=None):
    """Run the full loop; returns ``(records, graph)``.

    Per epoch: seeded shuffle, mini-batches with the last partial batch
    kept, forward/loss/backward/step per batch, then an eval-mode pass over
    ``val_set``.  Train loss/accuracy are the running averages over the
    epoch's training batches.
    """
    config.validate()
    for ds, name in ((train_set, "train"), (val_set, "validation")):
        _check_classes(ds, graph.config.num_classes, name)
    images, labels = _dataset_arrays(train_set)
    n = images.shape[0]
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {n}")

    rng = Rng(config.seed)
    optimizer = SgdOptimizer(graph, config.momentum, config.weight_decay)
    records = []
    csv_file = None
    if csv_path is not None:
        csv_file = open(csv_path, "w")
        csv_file.write(CSV_HEADER + "\n")
        csv_file.flush()
    try:
        for epoch in range(config.epochs):
            started = time.perf_counter()
            lr = config.lr_at(epoch)
            order = rng.child(1, epoch).permutation(n)
            loss_sum = 0.0
            correct = 0
            graph.set_mode("train")
            for batch_index, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start:start + config.batch_size]
                x = images[idx]
                y = labels[idx]
                dropout_rng = rng.child(2, epoch, batch_index)
                logits, _ = graph.forward(x, rng=dropout_rng)
                loss, probs, grad_logits = softmax_cross_entropy(logits, y)
                if not np.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, batch {batch_index}"
                    )
                loss_sum += loss * len(idx)
                correct += int((probs.argmax(axis=1) == y).sum())
                graph.backward(grad_logits)
                optimizer.step(lr)
            val_loss, val_acc, _ = evaluate(graph, val_set)
            record = MetricsRecord(
                epoch=epoch,
                train_loss=loss_sum / n,
                train_accuracy=correct / n,
                val_loss=val_loss,
                val_accuracy=val_acc,
                wall_time_s=time.perf_counter() - started,
            )
            records.append(record)
            if csv_file is not None:
                csv_file.write(record.csv_row() + "\n")
                csv_file.flush()
            if log is not None:
                log(f"epoch {epoch}: train_loss={record.train_loss:.4f} "
                    f"train_acc={record.train_accuracy:.4f} "
                    f"val_loss={record.val_loss:.4f} "
                    f"val_acc={record.val_accuracy:.4f} lr={lr:g}")
    finally:
        if csv_file is not None:
            csv_file.close()
    if json_path is not None:
        write_json_summary(json_path, records, config)
    return records, graph


def write_json_summary(path, records, config, extra=None):
    summary = {
        "epochs": len(records),
        "config": config.to_dict(),
        "final": {
            "train_loss": records[-1].train_loss,
            "train_accuracy": records[-1].train_accuracy,
            "val_loss": records[-1].val_loss,
            "val_accuracy": records[-1].val_accuracy,
        } if records else None,
        "best_val_accuracy": max((r.val_accuracy for r in records), default=None),
        "total_wall_time_s": sum(r.wall_time_s for r in records),
    }
    if extra:
        summary.update(extra)
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")


def evaluate(graph, dataset, batch_size=64):
    """Eval-mode loss, accuracy, and KxK confusion matrix (rows = truth).

    Mutates nothing: parameters, running statistics, and the graph's mode
    are all exactly as before the call.
    """
    images, labels = _dataset_arrays(dataset)
    n = images.shape[0]
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    k = graph.config.num_classes
    previous_mode = graph.mode
    graph.set_mode("eval")
    try:
        loss_sum = 0.0
        confusion = np.zeros((k, k), dtype=np.int64)
        for start in range(0, n, batch_size):
            x = images[start:start + batch_size]
            y = labels[start:start + batch_size]
            logits, probs = graph.forward(x)
            loss, _, _ = softmax_cross_entropy(logits, y)
            loss_sum += loss * len(y)
            predictions = probs.argmax(axis=1)
            np.add.at(confusion, (y, predictions), 1)
        accuracy = float(np.trace(confusion)) / n
        return loss_sum / n, accuracy, confusion
    finally:
        graph.set_mode(previous_mode)
