"""Baselines, the repeated few-shot evaluation protocol and the organ distance map."""
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import segnet
from .errors import ConfigurationError, InsufficientDataError, ProtocolError
from .losses import eval_iou
from .meta import MetaConfig, SupervisedConfig, UpdateRule, fine_tune, fit_batches, meta_train, step_lr
from .seeding import derive_seed, generator
from .tasks import sample_standard

log = logging.getLogger(__name__)

METHODS = ("random-init", "transfer", "meta-aw", "meta-idw")
RESULTS_HEADER = ("method", "task_rule", "update_rule", "seed", "iou")


@dataclass
class ExperimentResult:
    method: str
    task_rule: str
    update_rule: str
    seeds: list
    ious: list

    @property
    def mean(self):
        return float(np.mean(self.ious))

    @property
    def std(self):
        return float(np.std(self.ious))

    def rows(self):
        return [{"method": self.method, "task_rule": self.task_rule, "update_rule": self.update_rule,
                 "seed": s, "iou": f"{iou:.6f}"} for s, iou in zip(self.seeds, self.ious)]


@dataclass
class DistanceMatrix:
    dataset_ids: list
    distances: np.ndarray


@dataclass
class ProtocolConfig:
    shots: object = 15  # int or "all"
    selections: int = 5
    test_fraction: float = 0.5
    seed: int = 0
    finetune: SupervisedConfig = field(default_factory=SupervisedConfig)


# ---------------------------------------------------------------- splitting and evaluation

def split_target(target, seed, test_fraction=0.5):
    """Partition the target dataset by volume into fine-tune and test pools."""
    ids = np.array(sorted(target.volume_ids))
    if len(ids) < 2:
        raise InsufficientDataError("target needs at least two volumes to split")
    ids = generator(seed, "protocol").permutation(ids)
    n_test = min(max(1, int(round(len(ids) * test_fraction))), len(ids) - 1)
    test_ids, tune_ids = set(ids[:n_test].tolist()), set(ids[n_test:].tolist())
    tune, test = target.subset(tune_ids), target.subset(test_ids)
    check_disjoint(tune, test)
    return tune, test


def check_disjoint(tune, test):
    overlap = set(tune.volume_ids) & set(test.volume_ids)
    if overlap:
        raise ProtocolError(f"fine-tune and test pools share volumes {sorted(overlap)}")


def stack_pool(ds):
    """All eligible slices of a dataset as ``(images, masks, volume_ids)``."""
    pool = ds.pool()
    if not pool:
        raise InsufficientDataError(f"dataset {ds.dataset_id} has no eligible slices")
    images = np.stack([ds.volumes[vi].slices[si][None] for vi, si in pool])
    masks = np.stack([ds.volumes[vi].masks[si][None] for vi, si in pool]).astype(np.float32)
    return images, masks, np.array([ds.volumes[vi].volume_id for vi, _ in pool])


def select_shots(tune, shots, seed):
    if shots == "all":
        images, masks, vids = stack_pool(tune)
        return images, masks, vids
    task = sample_standard(tune, int(shots), np.random.default_rng(seed))
    return task.images, task.masks, np.array(task.volume_ids)


def predict(params, images, batch_size=64):
    images = np.asarray(images, dtype=params.values.dtype)
    return np.concatenate([segnet.forward(params, images[i:i + batch_size])
                           for i in range(0, len(images), batch_size)])


def evaluate(params, test):
    images, masks, _ = stack_pool(test)
    return eval_iou(predict(params, images), masks)


# ---------------------------------------------------------------- initialisations

def pooled_sources(sources, exclude=()):
    parts = [stack_pool(ds)[:2] for did, ds in sorted(sources.items()) if did not in exclude]
    if not parts:
        raise InsufficientDataError("no source slices to pool")
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def train_transfer_baseline(sources, cfg, init, target_ids=(), return_history=False):
    """Supervised training on every eligible source slice pooled together."""
    leaked = set(target_ids) & set(sources)
    if leaked:
        raise ProtocolError(f"transfer pool contains target datasets {sorted(leaked)}")
    images, masks = pooled_sources(sources)
    rng = np.random.default_rng(cfg.seed)
    params, losses = fit_batches(init, images, masks, cfg.epochs,
                                 lambda e: step_lr(cfg.lr, cfg.lr_decay, cfg.decay_period, e),
                                 cfg.weight_decay, cfg.batch_size, cfg.loss, rng)
    if return_history:
        per_epoch = int(np.ceil(len(images) / cfg.batch_size))
        epochs = [float(np.mean(losses[i:i + per_epoch])) for i in range(0, len(losses), per_epoch)]
        return params, epochs
    return params


def method_init(method, sources, meta_cfg, transfer_cfg, arch, seed):
    init = segnet.build(arch, derive_seed(seed, "init"))
    if method == "random-init":
        return init
    if method == "transfer":
        return train_transfer_baseline(sources, transfer_cfg, init)
    if method in ("meta-aw", "meta-idw"):
        cfg = replace(meta_cfg, update_rule=UpdateRule(method.split("-")[1]))
        return meta_train(sources, cfg, theta=init)[0]
    raise ConfigurationError(f"unknown method {method!r}")


def method_tags(method, meta_cfg):
    if method.startswith("meta-"):
        return meta_cfg.task_rule.value, method.split("-")[1]
    return "-", "-"


def protocol_seeds(protocol):
    return [derive_seed(protocol.seed, "protocol", j + 1) for j in range(protocol.selections)]


def evaluate_init(init, tune, test, protocol):
    """Fine-tune ``init`` on each shot selection and score it on the test pool."""
    check_disjoint(tune, test)
    test_ids = set(test.volume_ids)
    ious, seeds = [], protocol_seeds(protocol)
    for s in seeds:
        images, masks, vids = select_shots(tune, protocol.shots, s)
        if test_ids & set(vids.tolist()):
            raise ProtocolError("a fine-tuning shot comes from a test volume")
        phi = fine_tune(init, images, masks, replace(protocol.finetune, seed=s))
        ious.append(evaluate(phi, test))
    return seeds, ious


def run_protocol(sources, target, methods, meta_cfg=None, transfer_cfg=None, protocol=None,
                 arch=None, inits=None):
    """Evaluate each method's initialisation under the repeated few-shot protocol.

    ``inits`` may supply precomputed initialisations keyed by method.
    """
    meta_cfg = meta_cfg or MetaConfig()
    protocol = protocol or ProtocolConfig()
    arch = arch or segnet.ArchDescriptor()
    inits = dict(inits or {})
    if target.dataset_id in sources:
        raise ProtocolError("target dataset is also a source")
    tune, test = split_target(target, protocol.seed, protocol.test_fraction)
    results = []
    for method in methods:
        if method not in inits:
            inits[method] = method_init(method, sources, meta_cfg, transfer_cfg or SupervisedConfig(lr=0.001),
                                        arch, meta_cfg.seed)
        seeds, ious = evaluate_init(inits[method], tune, test, protocol)
        task_rule, update_rule = method_tags(method, meta_cfg)
        results.append(ExperimentResult(method, task_rule, update_rule, seeds, ious))
        log.info("%s: IoU %.2f +- %.2f", method, results[-1].mean, results[-1].std)
    return results


# ---------------------------------------------------------------- distance heatmap

def _random_slice(ds, rng):
    v = ds.volumes[rng.integers(len(ds.volumes))]
    return v.slices[rng.integers(v.depth)].astype(np.float64)


def mean_pair_distance(ds_a, ds_b, pairs, rng):
    total = 0.0
    for _ in range(pairs):
        total += float(np.linalg.norm(_random_slice(ds_a, rng) - _random_slice(ds_b, rng)))
    return total / pairs


def within_distance(ds, pairs, seed):
    """Mean distance between random slices of the same dataset (off-diagonal reference)."""
    return mean_pair_distance(ds, ds, pairs, np.random.default_rng(seed))


def distance_heatmap(datasets, pairs_per_cell=100, seed=0):
    """Average Euclidean distance between random slice pairs of every dataset pair."""
    ids = sorted(datasets)
    if len(ids) < 2:
        raise InsufficientDataError("heatmap needs at least two datasets")
    for did in ids:
        if not datasets[did].volumes:
            raise InsufficientDataError(f"dataset {did} has no volumes")
    if pairs_per_cell < 1:
        raise ConfigurationError("pairs_per_cell must be >= 1")
    n = len(ids)
    dist = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            ab = mean_pair_distance(datasets[ids[a]], datasets[ids[b]], pairs_per_cell,
                                    generator(seed, "heatmap", a, b))
            ba = mean_pair_distance(datasets[ids[b]], datasets[ids[a]], pairs_per_cell,
                                    generator(seed, "heatmap", b, a))
            dist[a, b] = dist[b, a] = 0.5 * (ab + ba)
    return DistanceMatrix(ids, dist)


# ---------------------------------------------------------------- output files

def write_results_csv(results, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULTS_HEADER, lineterminator="\n")
        writer.writeheader()
        for r in results:
            writer.writerows(r.rows())


def read_results_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_distance_csv(matrix, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dataset_id"] + list(matrix.dataset_ids))
        for did, row in zip(matrix.dataset_ids, matrix.distances):
            writer.writerow([did] + [repr(float(x)) for x in row])


def read_distance_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    ids = rows[0][1:]
    return DistanceMatrix(ids, np.array([[float(x) for x in r[1:]] for r in rows[1:]]))


def write_pgm(matrix, path):
    """8-bit binary PGM, min-max scaled over all cells."""
    d = np.asarray(matrix.distances, dtype=float)
    lo, hi = d.min(), d.max()
    scaled = np.zeros_like(d) if hi == lo else (d - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path):
    blob = Path(path).read_bytes()
    magic, dims, maxval, rest = blob.split(b"\n", 3)
    if magic != b"P5":
        raise ConfigurationError("not a binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8, count=w * h).reshape(h, w)
