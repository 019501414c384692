"""Distillation losses, Adam, the student training loop and the KD grid search.

Loss for a batch of N samples::

    L_S   = mean_i  -log softmax(z_i)[l_i]
    L_KD  = mean_i  -sum_j q_t[i, j] log q_s[i, j]
            q_t = softmax(teacher_i / T1), q_s = softmax(z_i / T2)
    L     = (1 - alpha) L_S + alpha (T1 T2) L_KD

With T1 == T2 == T the weight collapses to the usual T^2 factor.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import fcm
from .errors import ConfigError, TrainingError, ValidationError
from .optim import Adam
from .tsk import TskModel, backward, forward, log_softmax, softmax

log = logging.getLogger(__name__)

MODES = ("no_kd", "baseline_kd", "modified_kd")


@dataclass(frozen=True)
class TrainConfig:
    rules: int = 15
    pca_dims: int = 64
    alpha: float = 0.0
    temp_teacher: float = 1.0
    temp_student: float = 1.0
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.01
    lr_halving_period: int = 25
    seed: int = 0
    mode: str = "no_kd"
    fcm_m: float = 2.0
    fcm_max_iter: int = 100
    fcm_tol: float = 1e-4
    select: str = "best"

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temp_teacher <= 0 or self.temp_student <= 0:
            raise ConfigError("temperatures must be positive")
        if self.mode == "baseline_kd" and self.temp_teacher != self.temp_student:
            raise ConfigError("baseline_kd uses a single temperature (temp_teacher == temp_student)")
        if self.mode == "no_kd" and self.alpha != 0.0:
            raise ConfigError("no_kd requires alpha == 0")
        if self.rules < 1 or self.pca_dims < 1 or self.batch_size < 1:
            raise ConfigError("rules, pca_dims and batch_size must be positive")
        if self.epochs < 0 or self.lr_halving_period < 1 or self.lr <= 0:
            raise ConfigError("bad learning-rate schedule")
        if self.select not in ("best", "final"):
            raise ConfigError(f"select must be 'best' or 'final', got {self.select!r}")
        return self

    def lr_at(self, epoch):
        return self.lr * 0.5 ** (epoch // self.lr_halving_period)


@dataclass
class EpochReport:
    epoch: int
    loss: float
    loss_hard: float
    loss_kd: float
    kl: float
    train_acc: float
    val_acc: float
    lr: float
    seconds: float = 0.0

    def to_dict(self):
        return asdict(self)


# -- losses ---------------------------------------------------------------


def _check_temperature(t):
    if not t > 0:
        raise ValidationError(f"temperature must be positive, got {t}")


def softened_distribution(logits, t):
    _check_temperature(t)
    return softmax(np.asarray(logits, dtype=np.float64) / t)


def kd_loss(teacher_logits, student_logits, t1, t2):
    """Soft-target cross-entropy, averaged over rows when given a batch."""
    _check_temperature(t1)
    _check_temperature(t2)
    q_t = softmax(np.asarray(teacher_logits, dtype=np.float64) / t1)
    log_q_s = log_softmax(np.asarray(student_logits, dtype=np.float64) / t2)
    return float(np.mean(-np.sum(q_t * log_q_s, axis=-1)))


def hard_loss(student_logits, labels):
    z = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    labels = np.atleast_1d(labels)
    return float(np.mean(-log_softmax(z)[np.arange(z.shape[0]), labels]))


def combine_losses(l_s, l_kd, alpha, t1, t2):
    return (1.0 - alpha) * l_s + alpha * (t1 * t2) * l_kd


def baseline_loss(l_s, l_kd, alpha, t):
    """Single-temperature weighting; same code path as :func:`combine_losses`."""
    return combine_losses(l_s, l_kd, alpha, t, t)


def loss_and_grad(student_logits, labels, teacher_logits, cfg: TrainConfig):
    """Return ``(L, L_S, L_KD, KL, dL/dlogits)`` for a batch.

    The gradient already includes the 1/N of the batch mean.
    """
    z = np.asarray(student_logits, dtype=np.float64)
    n = z.shape[0]
    rows = np.arange(n)
    log_p = log_softmax(z)
    l_s = float(np.mean(-log_p[rows, labels]))
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    grad *= 1.0 - cfg.alpha

    l_kd = kl = 0.0
    if cfg.alpha > 0:
        if teacher_logits is None:
            raise ConfigError("alpha > 0 requires teacher soft labels")
        t1, t2 = cfg.temp_teacher, cfg.temp_student
        tz = np.asarray(teacher_logits, dtype=np.float64) / t1
        q_t = softmax(tz)
        log_q_s = log_softmax(z / t2)
        l_kd = float(np.mean(-np.sum(q_t * log_q_s, axis=1)))
        kl = float(np.mean(np.sum(q_t * (log_softmax(tz) - log_q_s), axis=1)))
        # d/dz of T1 T2 * CE(q_t, softmax(z / T2)) = T1 (q_s - q_t)
        grad += cfg.alpha * t1 * (np.exp(log_q_s) - q_t)

    total = combine_losses(l_s, l_kd, cfg.alpha, cfg.temp_teacher, cfg.temp_student)
    return total, l_s, l_kd, kl, grad / n


def total_loss(batch, model: TskModel, soft_labels, cfg: TrainConfig):
    """Combined loss of ``model`` on ``batch = (features, labels)``."""
    x, labels = batch
    if cfg.alpha > 0 and soft_labels is None:
        raise ConfigError("alpha > 0 requires teacher soft labels")
    logits = forward(model, np.atleast_2d(x)).logits
    return loss_and_grad(logits, np.atleast_1d(labels), soft_labels, cfg)[0]


# -- optimizer ------------------------------------------------------------


def adam_step(model: TskModel, grads, opt: Adam, lr):
    grads = grads.as_dict() if hasattr(grads, "as_dict") else grads
    opt.step(model.params(), grads, lr)
    model.clamp_sigmas()


# -- training -------------------------------------------------------------


def seed_streams(seed):
    """Independent RNGs for clustering init and batch shuffling."""
    fcm_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(fcm_ss), np.random.default_rng(shuffle_ss)


def init_student(features, n_classes, cfg: TrainConfig):
    """Rule antecedents from fuzzy c-means on the training features."""
    fcm_rng, _ = seed_streams(cfg.seed)
    if cfg.rules == 1:
        centers = features.mean(axis=0, keepdims=True)
        sigmas = np.maximum(features.std(axis=0, keepdims=True), fcm.SIGMA_MIN)
    else:
        res = fcm.fcm_cluster(
            features, cfg.rules, m=cfg.fcm_m, max_iter=cfg.fcm_max_iter,
            tol=cfg.fcm_tol, seed=fcm_rng,
        )
        centers, sigmas = fcm.init_rules(res, features)
    return TskModel.from_antecedents(centers, sigmas, n_classes)


def accuracy(model, features, labels, batch=2048):
    if len(labels) == 0:
        return float("nan")
    hits = 0
    for start in range(0, len(labels), batch):
        pred = model.predict(features[start:start + batch])
        hits += int(np.sum(pred == labels[start:start + batch]))
    return hits / len(labels)


def _param_norms(model):
    return {name: float(np.linalg.norm(p)) for name, p in model.params().items()}


def fit_features(x_train, y_train, x_val, y_val, n_classes, cfg: TrainConfig,
                 teacher_logits=None, init: TskModel | None = None, on_epoch=None):
    """Train a student on precomputed features. Returns ``(model, reports)``."""
    cfg.validate()
    if cfg.alpha > 0 and teacher_logits is None:
        raise ConfigError("alpha > 0 requires teacher soft labels")
    if teacher_logits is not None and teacher_logits.shape != (len(y_train), n_classes):
        raise ValidationError(
            f"soft labels {teacher_logits.shape} do not match ({len(y_train)}, {n_classes})"
        )
    model = init.copy() if init is not None else init_student(x_train, n_classes, cfg)
    _, shuffle_rng = seed_streams(cfg.seed)
    opt = Adam()
    n = len(y_train)
    reports = []
    best_model, best_acc = model.copy(), -1.0

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        sums = np.zeros(4)
        hits = 0
        for batch_idx, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            tb = teacher_logits[idx] if cfg.alpha > 0 else None
            trace = forward(model, xb)
            total, l_s, l_kd, kl, g = loss_and_grad(trace.logits, yb, tb, cfg)
            if not np.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {batch_idx}",
                    epoch=epoch,
                    diagnostics={"batch": batch_idx, "param_norms": _param_norms(model)},
                )
            sums += len(idx) * np.array([total, l_s, l_kd, kl])
            hits += int(np.sum(np.argmax(trace.logits, axis=1) == yb))
            adam_step(model, backward(model, xb, g, trace), opt, lr)

        val_acc = accuracy(model, x_val, y_val)
        mean = sums / n
        report = EpochReport(
            epoch=epoch, loss=mean[0], loss_hard=mean[1], loss_kd=mean[2], kl=mean[3],
            train_acc=hits / n, val_acc=val_acc, lr=lr,
            seconds=time.perf_counter() - start,
        )
        reports.append(report)
        log.info("epoch %d loss %.4f train %.4f val %.4f lr %g",
                 epoch, report.loss, report.train_acc, val_acc, lr)
        if on_epoch is not None:
            on_epoch(report)
        if val_acc > best_acc:
            best_acc, best_model = val_acc, model.copy()

    if cfg.select == "best" and reports:
        return best_model, reports
    return model, reports


def train_student(train, val, pca, soft, cfg: TrainConfig, init=None, on_epoch=None):
    """Fit a TSK student on PCA features of ``train``; ``soft`` may be None for no_kd."""
    if pca.n_components != cfg.pca_dims:
        raise ConfigError(f"PCA has {pca.n_components} components, config wants {cfg.pca_dims}")
    teacher = None
    if soft is not None:
        soft.check_pairing(train)
        teacher = np.asarray(soft.logits, dtype=np.float64)
    return fit_features(
        pca.transform(train.images), train.labels,
        pca.transform(val.images), val.labels,
        train.n_classes, cfg, teacher, init, on_epoch,
    )


def best_epoch(reports):
    """Index of the first epoch reaching the best validation accuracy."""
    accs = [r.val_acc for r in reports]
    return int(np.argmax(accs)) if accs else -1


def write_reports(reports, path, timing=False):
    """JSON-lines dump. Wall-clock ``seconds`` is left out unless ``timing``
    is set, so reruns with the same config produce identical files."""
    with open(path, "w") as f:
        for r in reports:
            row = r.to_dict()
            if not timing:
                del row["seconds"]
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_reports(path):
    with open(path) as f:
        return [EpochReport(**json.loads(line)) for line in f if line.strip()]


# -- grid search ----------------------------------------------------------


@dataclass
class GridResult:
    rows: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["T", "alpha", "rules", "best_val_acc", "epoch_of_best"])
            for row in self.rows:
                w.writerow([row["T"], row["alpha"], row["rules"],
                            repr(row["best_val_acc"]), row["epoch_of_best"]])


def cell_config(base: TrainConfig, t, alpha):
    """Config of one grid cell; baseline_kd ties both temperatures to ``t``."""
    t2 = t if base.mode == "baseline_kd" else base.temp_student
    return replace(base, temp_teacher=t, temp_student=t2, alpha=alpha)


def _run_cell(args):
    t, alpha, cfg, data, teacher, init = args
    try:
        _, reports = fit_features(*data, cfg, teacher, init)
    except TrainingError as exc:
        return {"T": t, "alpha": alpha, "error": str(exc), "epoch": exc.epoch}
    best = best_epoch(reports)
    return {"T": t, "alpha": alpha, "rules": cfg.rules,
            "best_val_acc": reports[best].val_acc if reports else float("nan"),
            "epoch_of_best": best}


def grid_search(train, val, pca, soft, base_cfg: TrainConfig, t_grid, alpha_grid, jobs=1):
    """Train one student per (T, alpha); all cells share one clustering init."""
    if not len(t_grid) or not len(alpha_grid):
        raise ConfigError("grids must be non-empty")
    if base_cfg.mode == "no_kd":
        raise ConfigError("grid search needs a KD mode")
    if soft is None:
        raise ConfigError("grid search needs teacher soft labels")
    soft.check_pairing(train)
    x_train = pca.transform(train.images)
    data = (x_train, train.labels, pca.transform(val.images), val.labels, train.n_classes)
    teacher = np.asarray(soft.logits, dtype=np.float64)
    init = init_student(x_train, train.n_classes, base_cfg)

    cells = []
    for t in t_grid:
        for alpha in alpha_grid:
            cfg = cell_config(base_cfg, t, alpha).validate()
            cells.append((t, alpha, cfg, data, teacher, init))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell, cells))
    else:
        outcomes = [_run_cell(c) for c in cells]

    result = GridResult()
    for out in outcomes:
        (result.errors if "error" in out else result.rows).append(out)
    result.rows.sort(key=lambda r: (-r["best_val_acc"], r["T"], r["alpha"]))
    return result
