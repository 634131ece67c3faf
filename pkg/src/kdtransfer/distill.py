"""Knowledge-distillation losses, schedules and the training loops.

The soft loss is ``tau**2 * mean_b KL(J_b || P_b)`` where ``J`` and ``P`` are
the teacher and student distributions, both softened at ``tau``. The
``tau**2`` factor keeps the soft-term gradient magnitude roughly independent
of ``tau`` and can be switched off with ``scale_tau2=False``. Gradients only
ever flow into the student logits.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import batches
from .nn import DTYPE, AdamState, NonFiniteError, adam_step, log_softmax, softmax

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


# -- losses ---------------------------------------------------------------


def softmax_tau(logits, tau):
    return softmax(logits, tau)


def _soft_parts(teacher_logits, student_logits, tau):
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    teacher_logits = np.asarray(teacher_logits)
    student_logits = np.asarray(student_logits)
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"teacher {teacher_logits.shape} vs student {student_logits.shape}")
    log_j = log_softmax(teacher_logits, tau)
    log_p = log_softmax(student_logits, tau)
    return log_j, log_p


def soft_loss_and_grad(teacher_logits, student_logits, tau, scale_tau2=True):
    log_j, log_p = _soft_parts(teacher_logits, student_logits, tau)
    j = np.exp(log_j)
    n = len(j)
    scale = tau * tau if scale_tau2 else 1.0
    kl = (j * (log_j - log_p)).sum(axis=1)
    loss = scale * float(kl.mean())
    # d/ds KL(J || softmax(s / tau)) = (P - J) / tau
    grad = scale * (np.exp(log_p) - j) / (tau * n)
    return loss, grad.astype(DTYPE)


def soft_loss(teacher_logits, student_logits, tau, scale_tau2=True):
    """Batch-mean KL(teacher || student) at temperature ``tau``."""
    return soft_loss_and_grad(teacher_logits, student_logits, tau, scale_tau2)[0]


def hard_loss_and_grad(student_logits, labels):
    logp = log_softmax(student_logits)
    labels = np.asarray(labels)
    n = len(labels)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, (grad / n).astype(DTYPE)


def hard_loss(student_logits, labels):
    """Batch-mean cross-entropy against integer labels, at temperature 1."""
    return hard_loss_and_grad(student_logits, labels)[0]


def kd_loss(alpha, hard, soft):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * hard + (1.0 - alpha) * soft


def joint_soft_loss_and_grad(teacher_logit_list, student_logits, tau, scale_tau2=True):
    if not teacher_logit_list:
        raise ValueError("joint distillation needs at least one teacher")
    losses, grads = zip(*(soft_loss_and_grad(t, student_logits, tau, scale_tau2)
                          for t in teacher_logit_list))
    k = len(losses)
    return sum(losses) / k, (sum(grads) / k).astype(DTYPE)


def joint_soft_loss(teacher_logit_list, student_logits, tau, scale_tau2=True):
    """Unweighted mean of the per-teacher soft losses."""
    return joint_soft_loss_and_grad(teacher_logit_list, student_logits, tau, scale_tau2)[0]


def curriculum_teacher(epoch, switch_period, num_teachers):
    if switch_period < 1 or num_teachers < 1:
        raise ValueError("switch_period and num_teachers must be >= 1")
    return (epoch // switch_period) % num_teachers


# -- schedule -------------------------------------------------------------


@dataclass
class TrainSchedule:
    max_epochs: int = 100
    warmup_epochs: int = 30
    max_lr: float = 1e-2
    patience: int = 10
    plateau_tol: float = 1e-4
    batch_size: int = 256
    weight_decay: float = 1e-6

    def __post_init__(self):
        if self.max_epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.max_epochs > 0 and self.warmup_epochs >= self.max_epochs:
            raise ConfigError("warmup_epochs must be < max_epochs")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_lr <= 0:
            raise ConfigError("max_lr must be positive")


def lr_at(epoch, schedule):
    """Linear warmup to ``max_lr`` then cosine decay towards zero."""
    e, w, total, top = epoch, schedule.warmup_epochs, schedule.max_epochs, schedule.max_lr
    if not 0 <= e < total:
        raise ValueError(f"epoch {e} outside [0, {total})")
    if e < w:
        return top * (e + 1) / w
    return top * 0.5 * (1.0 + math.cos(math.pi * (e - w) / (total - w)))


@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    teacher_index: list = field(default_factory=list)
    seed: int = 0
    best_epoch: int = -1

    def __len__(self):
        return len(self.epoch)

    def append(self, **row):
        for key, value in row.items():
            getattr(self, key).append(value)

    @property
    def best_val_acc(self):
        return self.val_acc[self.best_epoch] if self.best_epoch >= 0 else float("nan")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr", "teacher_index"])
            for row in zip(self.epoch, self.train_loss, self.val_loss, self.val_acc,
                           self.lr, self.teacher_index):
                writer.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}", f"{row[3]:.6f}",
                                 f"{row[4]:.8g}", row[5]])

    @classmethod
    def from_csv(cls, path):
        hist = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                hist.append(epoch=int(row["epoch"]), train_loss=float(row["train_loss"]),
                            val_loss=float(row["val_loss"]), val_acc=float(row["val_acc"]),
                            lr=float(row["lr"]), teacher_index=int(row["teacher_index"]))
        return hist


class EarlyStopping:
    """Stop after ``patience`` epochs without a val-loss drop beyond ``tol``."""

    def __init__(self, patience, tol):
        self.patience, self.tol = patience, tol
        self.best = math.inf
        self.bad = 0

    def update(self, val_loss):
        if val_loss < self.best - self.tol:
            self.best = val_loss
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


def evaluate(model, dataset, batch_size=500):
    """``(mean cross-entropy, accuracy)`` over a dataset."""
    total_loss, correct = 0.0, 0
    for images, labels, _ in batches(dataset, batch_size):
        logits = model.forward(images)
        logp = log_softmax(logits)
        total_loss += float(-logp[np.arange(len(labels)), labels].sum())
        correct += int((logits.argmax(axis=1) == labels).sum())
    n = max(len(dataset), 1)
    return total_loss / n, correct / n


def fit(model, data, schedule, objective, seed=0, log=None, teacher_index=None):
    """Shared minibatch loop.

    ``objective(images, labels, indices, logits, epoch) -> (loss, dlogits)``.
    ``teacher_index(epoch)`` only feeds the history. Shuffling uses ``seed``.
    Returns the model restored to its best-validation-accuracy epoch and the
    history; the input model is updated in place.
    """
    train, val = data
    log = log or logger.info
    state = AdamState(weight_decay=schedule.weight_decay)
    stopper = EarlyStopping(schedule.patience, schedule.plateau_tol)
    history = TrainHistory(seed=seed)
    best_acc, best_state = -1.0, None
    for epoch in range(schedule.max_epochs):
        lr = lr_at(epoch, schedule)
        total, count = 0.0, 0
        for b, (images, labels, idx) in enumerate(batches(train, schedule.batch_size, seed, epoch)):
            logits, tape = model.forward(images, record=True)
            loss, dlogits = objective(images, labels, idx, logits, epoch)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}", history)
            _, grads = model.backward(tape, dlogits)
            try:
                adam_step(model.params, grads, state, lr)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}", history) from None
            total += loss * len(labels)
            count += len(labels)
        val_loss, val_acc = evaluate(model, val)
        t_idx = -1 if teacher_index is None else teacher_index(epoch)
        history.append(epoch=epoch, train_loss=total / max(count, 1), val_loss=val_loss,
                       val_acc=val_acc, lr=lr, teacher_index=t_idx)
        log(f"[{model.name} seed={seed}] epoch {epoch} lr={lr:.2e} train={total / max(count, 1):.4f} "
            f"val={val_loss:.4f} acc={val_acc:.4f}")
        if val_acc > best_acc:
            best_acc, best_state = val_acc, model.state()
            history.best_epoch = epoch
        if stopper.update(val_loss):
            break
    if best_state is not None:
        model.load_state(best_state)
    return model, history


# -- distillation ---------------------------------------------------------


@dataclass
class KDConfig:
    strategy: str = "curriculum"
    alpha: float = 0.3
    tau: float = 1.0
    switch_period: int = 4
    seeds: tuple = (0, 1)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    scale_tau2: bool = True

    def __post_init__(self):
        if self.strategy not in ("curriculum", "joint"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.strategy == "curriculum" and self.switch_period < 1:
            raise ConfigError("curriculum needs switch_period >= 1")
        if not self.seeds:
            raise ConfigError("seed list is empty")

    @property
    def label(self):
        return f"{self.strategy}-a{self.alpha:g}-t{self.tau:g}"


def teacher_logits_for(teachers, dataset, batch_size=500):
    """Frozen teachers on a fixed dataset give fixed logits; compute them once."""
    return [
        np.concatenate([t.forward(images) for images, _, _ in batches(dataset, batch_size)])
        for t in teachers
    ]


def train_student(config, teachers, data, student_factory, log=None):
    """Distil ``teachers`` into a student, once per seed, keep the best.

    ``student_factory(seed)`` returns a freshly initialised student. Teachers
    are only read. Returns ``(student, history)`` for the seed with the higher
    best validation accuracy (earlier seed on ties).
    """
    if not teachers:
        raise ConfigError("no teachers given")
    train, val = data
    cached = teacher_logits_for(teachers, train)
    k = len(teachers)

    def objective(images, labels, idx, logits, epoch):
        hard, g_hard = hard_loss_and_grad(logits, labels)
        if config.strategy == "curriculum":
            active = curriculum_teacher(epoch, config.switch_period, k)
            soft, g_soft = soft_loss_and_grad(cached[active][idx], logits, config.tau, config.scale_tau2)
        else:
            soft, g_soft = joint_soft_loss_and_grad([c[idx] for c in cached], logits,
                                                    config.tau, config.scale_tau2)
        a = config.alpha
        return kd_loss(a, hard, soft), a * g_hard + (1.0 - a) * g_soft

    def active_teacher(epoch):
        if config.strategy == "curriculum":
            return curriculum_teacher(epoch, config.switch_period, k)
        return -1

    best = None
    for seed in config.seeds:
        student = student_factory(seed)
        for t in teachers:
            if t.num_classes != student.num_classes:
                raise ConfigError(f"teacher {t.name!r} has {t.num_classes} classes, "
                                  f"student has {student.num_classes}")
        student, history = fit(student, (train, val), config.schedule, objective,
                               seed=seed, log=log, teacher_index=active_teacher)
        if best is None or history.best_val_acc > best[1].best_val_acc:
            best = (student, history)
    return best
