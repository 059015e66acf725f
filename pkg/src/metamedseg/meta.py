"""Reptile-style meta-training with average or inverse-distance task weighting."""
import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import segnet
from .autodiff import sgd_step
from .errors import ConfigurationError, NumericError, TrainingDivergedError
from .losses import LossKind, LossSpec
from .seeding import derive_seed, generator
from .tasks import TaskRule, compute_sampling_weights, sample_meta_batch

log = logging.getLogger(__name__)

SQ_DIST_FLOOR = 1e-12
LOG_HEADER = ("epoch", "mean_loss", "mean_sq_dist", "weight_entropy", "update_rule", "task_rule")


class UpdateRule(str, enum.Enum):
    AW = "aw"
    IDW = "idw"


@dataclass
class MetaConfig:
    meta_epochs: int = 100
    tasks_per_epoch: int = 5
    shots: int = 15
    inner_lr: float = 0.01
    meta_lr: float = 0.01
    inner_epochs: int = 4
    inner_batch: int = 5
    weight_decay: float = 0.003
    lr_decay: float = 0.7
    decay_period: int = 2
    update_rule: UpdateRule = UpdateRule.AW
    task_rule: TaskRule = TaskRule.VOLUME
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.update_rule = UpdateRule(self.update_rule)
        self.task_rule = TaskRule(self.task_rule)
        if not isinstance(self.loss, LossSpec):
            self.loss = LossSpec(LossKind(self.loss))
        if min(self.meta_epochs, self.tasks_per_epoch, self.shots) < 1:
            raise ConfigurationError("meta_epochs, tasks_per_epoch and shots must be >= 1")
        if self.inner_lr <= 0 or self.meta_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError("lr_decay must lie in (0, 1]")
        if self.inner_epochs < 0 or self.inner_batch < 1 or self.decay_period < 1:
            raise ConfigurationError("inner_epochs >= 0, inner_batch >= 1, decay_period >= 1 required")


@dataclass
class SupervisedConfig:
    """Plain supervised training; defaults are the few-shot fine-tuning setup."""

    epochs: int = 20
    lr: float = 0.005
    lr_decay: float = 0.7
    decay_period: int = 2
    weight_decay: float = 3e-5
    batch_size: int = 5
    loss: LossSpec = field(default_factory=lambda: LossSpec(LossKind.SOFT_IOU))
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.loss, LossSpec):
            self.loss = LossSpec(LossKind(self.loss))
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and lr > 0 required")


def transfer_config(**overrides):
    base = dict(lr=0.001, weight_decay=3e-5, epochs=20, loss=LossSpec(LossKind.WEIGHTED_BCE))
    base.update(overrides)
    return SupervisedConfig(**base)


@dataclass
class TaskUpdate:
    delta: np.ndarray  # float64, theta_l - theta
    task_id: int = 0
    sq_dist: float = None
    loss: float = float("nan")
    local: np.ndarray = None  # theta_l itself, when known

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.sq_dist is None:
            self.sq_dist = float(np.dot(self.delta, self.delta))


def step_lr(base, gamma, period, epoch):
    return base * gamma ** (epoch // period)


def fit_batches(params, images, masks, epochs, lr_at, weight_decay, batch_size, loss, rng,
                task_id=None):
    """SGD over mini-batches; returns new params and the per-batch losses."""
    values = params.values.copy()
    n = len(images)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n) if n > 1 else np.zeros(1, dtype=int)
        lr = lr_at(epoch)
        for start in range(0, n, batch_size):
            idx = np.sort(order[start:start + batch_size])
            try:
                value, grad = segnet.loss_and_grad(params.replace(values), images[idx], masks[idx], loss)
            except NumericError as exc:
                raise TrainingDivergedError(str(exc), task_id=task_id) from exc
            if not np.isfinite(value):
                raise TrainingDivergedError("non-finite loss", task_id=task_id)
            values = sgd_step(values, grad, lr, weight_decay).astype(values.dtype, copy=False)
            losses.append(value)
    if not np.all(np.isfinite(values)):
        raise TrainingDivergedError("parameters became non-finite", task_id=task_id)
    return params.replace(values), losses


def _local(theta, task, cfg, lr, seed, task_id):
    if len(task) == 0:
        raise ConfigurationError("cannot train on an empty task")
    rng = np.random.default_rng(seed)
    return fit_batches(theta, task.images.astype(theta.values.dtype), task.masks.astype(theta.values.dtype),
                       cfg.inner_epochs, lambda _e: lr, cfg.weight_decay, cfg.inner_batch,
                       cfg.loss, rng, task_id=task_id)


def train_local(theta, task, cfg, lr=None, seed=0, task_id=0):
    """Copy of ``theta`` trained on the task's shots; ``theta`` is left untouched."""
    return _local(theta, task, cfg, cfg.inner_lr if lr is None else lr, seed, task_id)[0]


def make_update(theta, theta_l, task_id=0, loss=float("nan")):
    delta = theta_l.values.astype(np.float64) - theta.values.astype(np.float64)
    return TaskUpdate(delta, task_id, loss=loss, local=theta_l.values)


def _apply(theta, updates, w, beta):
    # With weights summing to one, theta + beta*sum(w*delta) equals
    # (1-beta)*theta + beta*sum(w*theta_l); the second form avoids cancellation.
    base = theta.values.astype(np.float64)
    if all(u.local is not None for u in updates):
        pulled = np.sum([wi * u.local.astype(np.float64) for wi, u in zip(w, updates)], axis=0)
        new = (1.0 - beta) * base + beta * pulled
    else:
        new = base + beta * np.sum([wi * u.delta for wi, u in zip(w, updates)], axis=0)
    return theta.replace(new.astype(theta.values.dtype))


def aggregate_aw(theta, updates, beta):
    if not updates:
        raise ConfigurationError("aggregation needs at least one task update")
    return _apply(theta, updates, np.full(len(updates), 1.0 / len(updates)), beta)


def compute_idw_weights(updates):
    """Normalised inverse squared distances; closer task models weigh more."""
    if not updates:
        raise ConfigurationError("aggregation needs at least one task update")
    d2 = np.maximum([u.sq_dist for u in updates], SQ_DIST_FLOOR)
    raw = 1.0 / d2
    return raw / raw.sum()


def aggregate_idw(theta, updates, beta):
    return _apply(theta, updates, compute_idw_weights(updates), beta)


def aggregate(theta, updates, beta, rule):
    if UpdateRule(rule) is UpdateRule.IDW:
        return aggregate_idw(theta, updates, beta)
    return aggregate_aw(theta, updates, beta)


def task_weights(updates, rule):
    if UpdateRule(rule) is UpdateRule.IDW:
        return compute_idw_weights(updates)
    return np.full(len(updates), 1.0 / len(updates))


def weight_entropy(w):
    w = np.asarray(w, dtype=float)
    w = w[w > 0]
    return float(-(w * np.log(w)).sum())


def source_weights(sources):
    return compute_sampling_weights([(ds.dataset_id, ds.organ, ds.z) for ds in sources.values()])


def meta_train(sources, cfg, theta=None, arch=None, callback=None):
    """Run the meta-epoch loop; returns the meta-model and one log row per epoch.

    ``sources`` maps dataset-id to a preprocessed dataset.  When ``theta`` is
    omitted a fresh network is built from the ``init`` stream of ``cfg.seed``.
    """
    if not sources:
        raise ConfigurationError("meta-training needs at least one source dataset")
    if theta is None:
        theta = segnet.build(arch or segnet.ArchDescriptor(), derive_seed(cfg.seed, "init"))
    weights = source_weights(sources)
    task_rng = generator(cfg.seed, "tasks")
    rows = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(cfg.meta_epochs):
            tasks = sample_meta_batch(sources, weights, cfg.tasks_per_epoch, cfg.shots,
                                      cfg.task_rule, task_rng)
            lr = step_lr(cfg.inner_lr, cfg.lr_decay, cfg.decay_period, epoch)
            seeds = [derive_seed(cfg.seed, "train", epoch, i) for i in range(len(tasks))]

            def run(i, theta=theta, lr=lr, tasks=tasks, seeds=seeds, epoch=epoch):
                try:
                    local, losses = _local(theta, tasks[i], cfg, lr, seeds[i], i)
                except TrainingDivergedError as exc:
                    raise TrainingDivergedError("local training diverged", task_id=i, epoch=epoch) from exc
                return make_update(theta, local, i, float(np.mean(losses)) if losses else float("nan"))

            if pool is None:
                updates = [run(i) for i in range(len(tasks))]
            else:
                updates = list(pool.map(run, range(len(tasks))))
            w = task_weights(updates, cfg.update_rule)
            theta = aggregate(theta, updates, cfg.meta_lr, cfg.update_rule)
            if not np.all(np.isfinite(theta.values)):
                raise TrainingDivergedError("meta-model became non-finite", epoch=epoch)
            row = {
                "epoch": epoch,
                "mean_loss": float(np.mean([u.loss for u in updates])),
                "mean_sq_dist": float(np.mean([u.sq_dist for u in updates])),
                "weight_entropy": weight_entropy(w),
                "update_rule": cfg.update_rule.value,
                "task_rule": cfg.task_rule.value,
            }
            rows.append(row)
            log.debug("meta-epoch %d loss=%.4f d2=%.3g", epoch, row["mean_loss"], row["mean_sq_dist"])
            if callback is not None:
                callback(row, tasks)
    finally:
        if pool is not None:
            pool.shutdown()
    return theta, rows


def fine_tune_with_history(theta_init, images, masks, cfg):
    """Supervised training from ``theta_init`` with a step-decayed learning rate."""
    images = np.asarray(images, dtype=theta_init.values.dtype)
    masks = np.asarray(masks, dtype=theta_init.values.dtype)
    if len(images) == 0:
        raise ConfigurationError("fine-tuning needs at least one shot")
    rng = np.random.default_rng(cfg.seed)
    return fit_batches(theta_init, images, masks, cfg.epochs,
                       lambda e: step_lr(cfg.lr, cfg.lr_decay, cfg.decay_period, e),
                       cfg.weight_decay, cfg.batch_size, cfg.loss, rng)


def fine_tune(theta_init, images, masks, cfg):
    return fine_tune_with_history(theta_init, images, masks, cfg)[0]
