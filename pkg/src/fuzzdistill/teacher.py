"""Fully-connected ReLU teacher trained on raw pixels, and logit export."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .data_ingest import Dataset, SoftLabelSet
from .errors import DimensionError, FormatError, TrainingError
from .optim import Adam
from .tsk import log_softmax, softmax

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "mlp-teacher"


@dataclass(frozen=True)
class TeacherConfig:
    hidden: tuple = (256, 128)
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0


@dataclass
class MlpTeacher:
    weights: list  # weights[k] has shape (fan_in, fan_out)
    biases: list
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, sizes, rng):
        """He-normal weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_inputs(self):
        return self.weights[0].shape[0]

    @property
    def n_classes(self):
        return self.weights[-1].shape[1]

    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self):
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{k}"] = w
            out[f"b{k}"] = b
        return out

    def _forward(self, x):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def logits(self, x, batch=4096):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_inputs:
            raise DimensionError(f"teacher expects {self.n_inputs} inputs, got {x.shape[-1]}")
        if x.ndim == 1:
            return self._forward(x[None])[-1][0]
        return np.concatenate(
            [self._forward(x[i:i + batch])[-1] for i in range(0, len(x), batch)]
        ) if len(x) else np.zeros((0, self.n_classes))

    def predict_proba(self, x):
        return softmax(self.logits(x))

    def accuracy(self, data: Dataset):
        return float(np.mean(np.argmax(self.logits(data.images), axis=1) == data.labels))

    def _grads(self, x, labels):
        acts = self._forward(x)
        n = len(labels)
        log_p = log_softmax(acts[-1])
        loss = float(np.mean(-log_p[np.arange(n), labels]))
        delta = np.exp(log_p)
        delta[np.arange(n), labels] -= 1.0
        delta /= n
        grads = {}
        for k in range(len(self.weights) - 1, -1, -1):
            grads[f"W{k}"] = acts[k].T @ delta
            grads[f"b{k}"] = delta.sum(axis=0)
            if k:
                delta = (delta @ self.weights[k].T) * (acts[k] > 0)
        return loss, grads


def train_teacher(train: Dataset, config: TeacherConfig | None = None, val: Dataset | None = None):
    """Cross-entropy training on hard labels with Adam.

    Per-epoch loss and accuracies are appended to ``teacher.history``.
    """
    config = config or TeacherConfig()
    rng = np.random.default_rng(config.seed)
    sizes = [train.images.shape[1], *config.hidden, train.n_classes]
    teacher = MlpTeacher.init(sizes, rng)
    opt = Adam()
    params = teacher.params()
    n = len(train)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss, grads = teacher._grads(train.images[idx], train.labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"teacher loss diverged in epoch {epoch}", epoch=epoch)
            total += loss * len(idx)
            opt.step(params, grads, config.lr)
        entry = {"epoch": epoch, "loss": total / n, "train_acc": teacher.accuracy(train)}
        if val is not None:
            entry["val_acc"] = teacher.accuracy(val)
        teacher.history.append(entry)
        log.info("teacher epoch %d: %s", epoch, entry)
    return teacher


def export_logits(teacher: MlpTeacher, data: Dataset, source_id="") -> SoftLabelSet:
    """Pre-softmax teacher outputs, one row per sample in dataset order."""
    if data.images.shape[1] != teacher.n_inputs:
        raise DimensionError(
            f"teacher expects {teacher.n_inputs} inputs, data has {data.images.shape[1]}"
        )
    return SoftLabelSet(teacher.logits(data.images), source_id=source_id)


def save_teacher(path, teacher: MlpTeacher, meta=None):
    write_container(path, CHECKPOINT_KIND, teacher.params(), {"sizes": teacher.sizes, "meta": meta or {}})


def load_teacher(path):
    _, arrays, header = read_container(path, CHECKPOINT_KIND)
    n_layers = len(header["sizes"]) - 1
    try:
        weights = [arrays[f"W{k}"] for k in range(n_layers)]
        biases = [arrays[f"b{k}"] for k in range(n_layers)]
    except KeyError as exc:
        raise FormatError(f"{path}: missing array {exc}") from None
    return MlpTeacher(weights, biases), header["meta"]
