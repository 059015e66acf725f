"""Few-shot task construction: standard and volume-based rules."""
import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InsufficientDataError


class TaskRule(str, enum.Enum):
    STANDARD = "standard"
    VOLUME = "volume"


@dataclass(frozen=True, eq=False)
class Task:
    shots: list
    dataset_id: str
    rule: TaskRule
    volume_id: int = None

    def __len__(self):
        return len(self.shots)

    @property
    def images(self):
        return np.stack([s.image for s in self.shots])

    @property
    def masks(self):
        return np.stack([s.mask for s in self.shots]).astype(np.float32)

    @property
    def slice_indices(self):
        return [s.slice_index for s in self.shots]

    @property
    def volume_ids(self):
        return [s.volume_id for s in self.shots]


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_standard(dataset, k, seed):
    """K eligible slices drawn uniformly without replacement from any volume."""
    pool = dataset.pool()
    if len(pool) < k:
        raise InsufficientDataError(
            f"dataset {dataset.dataset_id} has {len(pool)} eligible slices, need {k}")
    picks = _rng(seed).choice(len(pool), size=k, replace=False)
    shots = [dataset.sample(*pool[i]) for i in picks]
    return Task(shots, dataset.dataset_id, TaskRule.STANDARD)


def volume_step(n_slices, k):
    return max(1, math.ceil(n_slices / k))


def stepped_indices(eligible, k):
    """Every ``ceil(|V|/K)``-th eligible slice, starting at the first one."""
    eligible = np.asarray(eligible)
    if eligible.size == 0:
        raise InsufficientDataError("volume has no eligible slices")
    step = volume_step(eligible.size, k)
    return eligible[::step][:k]


def sample_volume_based(dataset, k, volume_index=0):
    idx = stepped_indices(dataset.eligible[volume_index], k)
    shots = [dataset.sample(volume_index, int(si)) for si in idx]
    v = dataset.volumes[volume_index]
    return Task(shots, dataset.dataset_id, TaskRule.VOLUME, v.volume_id)


def compute_sampling_weights(datasets):
    """Rate ``1/z`` per dataset, normalised; ``datasets`` is ``(id, organ, z)`` triples."""
    raw = {}
    for dataset_id, _organ, z in datasets:
        if z < 1:
            raise ConfigurationError(f"dataset {dataset_id} has modality count {z} < 1")
        raw[dataset_id] = 1.0 / z
    if not raw:
        raise InsufficientDataError("no datasets to weight")
    total = sum(raw.values())
    return {k: v / total for k, v in raw.items()}


def sample_meta_batch(sources, weights, n_tasks, k, rule, seed):
    """Draw ``n_tasks`` datasets (with replacement) by weight and one task from each.

    ``sources`` maps dataset-id to a preprocessed dataset.
    """
    if n_tasks < 1:
        raise ConfigurationError("need at least one task per meta-batch")
    rule = TaskRule(rule)
    rng = _rng(seed)
    ids = sorted(sources)
    p = np.array([weights.get(i, 0.0) for i in ids], dtype=float)
    p = p / p.sum()
    tasks = []
    for pick in rng.choice(len(ids), size=n_tasks, p=p):
        ds = sources[ids[pick]]
        if rule is TaskRule.STANDARD:
            tasks.append(sample_standard(ds, k, rng))
        else:
            usable = [i for i, e in enumerate(ds.eligible) if len(e)]
            if not usable:
                raise InsufficientDataError(f"dataset {ds.dataset_id} has no eligible volumes")
            tasks.append(sample_volume_based(ds, k, usable[rng.integers(len(usable))]))
    return tasks
