import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metamedseg import meta, segnet
from metamedseg.errors import ConfigurationError, TrainingDivergedError
from metamedseg.meta import MetaConfig, TaskUpdate, UpdateRule

from conftest import make_dataset

SMALL = segnet.ArchDescriptor(base_width=2, depth=1)


def theta_of(values):
    arch = segnet.ArchDescriptor(base_width=2, depth=1)
    v = np.zeros(arch.n_params, dtype=np.float64)
    v[:len(values)] = values
    return segnet.ParamVector(v, arch)


def test_idw_weights_for_one_and_four():
    ups = [TaskUpdate(np.zeros(3), sq_dist=1.0), TaskUpdate(np.zeros(3), sq_dist=4.0)]
    w = meta.compute_idw_weights(ups)
    assert w.tolist() == [0.8, 0.2]


def test_idw_sq_dist_is_squared_norm():
    assert TaskUpdate(np.array([3.0, 4.0])).sq_dist == 25.0


def test_idw_floor_for_zero_distance():
    w = meta.compute_idw_weights([TaskUpdate(np.zeros(2)), TaskUpdate(np.ones(2))])
    assert np.isfinite(w).all()
    assert w[0] == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=12))
def test_idw_weights_sum_to_one(d2):
    w = meta.compute_idw_weights([TaskUpdate(np.zeros(1), sq_dist=d) for d in d2])
    assert abs(w.sum() - 1) <= 1e-9
    assert (w > 0).all()


def _random_updates(rng, n, size, equal=False):
    deltas = rng.normal(size=(n, size))
    if equal:
        deltas /= np.linalg.norm(deltas, axis=1, keepdims=True)
    return [TaskUpdate(d, i) for i, d in enumerate(deltas)]


def test_idw_equals_aw_for_equal_distances():
    rng = np.random.default_rng(0)
    theta = theta_of(rng.normal(size=50))
    ups = _random_updates(rng, 5, theta.values.size, equal=True)
    a = meta.aggregate_aw(theta, ups, 0.7).values
    b = meta.aggregate_idw(theta, ups, 0.7).values
    assert np.max(np.abs(a - b)) < 1e-9


@pytest.mark.parametrize("rule", list(UpdateRule))
def test_aggregation_permutation_invariant(rule):
    rng = np.random.default_rng(1)
    theta = theta_of(rng.normal(size=60))
    ups = _random_updates(rng, 4, theta.values.size)
    ref = meta.aggregate(theta, ups, 0.5, rule).values
    for perm in itertools.permutations(ups):
        assert np.max(np.abs(meta.aggregate(theta, list(perm), 0.5, rule).values - ref)) < 1e-12


@pytest.mark.parametrize("rule", list(UpdateRule))
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_single_task_full_step_lands_on_task_model(rule, dtype):
    rng = np.random.default_rng(2)
    arch = segnet.ArchDescriptor(base_width=2, depth=1)
    theta = segnet.ParamVector(rng.normal(size=arch.n_params).astype(dtype), arch)
    local = segnet.ParamVector(rng.normal(size=arch.n_params).astype(dtype), arch)
    out = meta.aggregate(theta, [meta.make_update(theta, local)], 1.0, rule).values
    assert out.dtype == dtype
    ulps = np.abs(out - local.values) / np.spacing(np.abs(local.values))
    assert ulps.max() <= 1


def test_aggregate_without_updates():
    with pytest.raises(ConfigurationError):
        meta.aggregate_aw(theta_of([0.0]), [], 1.0)
    with pytest.raises(ConfigurationError):
        meta.compute_idw_weights([])


def test_weight_entropy():
    assert meta.weight_entropy([0.5, 0.5]) == pytest.approx(np.log(2))
    assert meta.weight_entropy([1.0]) == 0.0


def test_step_lr():
    assert meta.step_lr(1.0, 0.5, 2, 0) == 1.0
    assert meta.step_lr(1.0, 0.5, 2, 3) == 0.5
    assert meta.step_lr(1.0, 0.5, 2, 4) == 0.25


def test_config_validation():
    with pytest.raises(ConfigurationError):
        MetaConfig(shots=0)
    with pytest.raises(ConfigurationError):
        MetaConfig(inner_lr=-1)
    with pytest.raises(ValueError):
        MetaConfig(update_rule="median")
    assert MetaConfig(loss="dice").loss.kind.value == "dice"


# ---------------------------------------------------------------- training loops

def _tiny_sources():
    return {"a": make_dataset("a", n_volumes=2, depth=10, size=8),
            "b": make_dataset("b", n_volumes=2, depth=10, size=8, z=2)}


def _tiny_cfg(**kw):
    base = dict(meta_epochs=3, tasks_per_epoch=2, shots=3, inner_epochs=1, inner_batch=3,
                inner_lr=0.05, meta_lr=0.5, seed=5)
    base.update(kw)
    return MetaConfig(**base)


def test_train_local_leaves_theta_untouched():
    ds = make_dataset(n_volumes=1, depth=6)
    from metamedseg.tasks import sample_volume_based
    task = sample_volume_based(ds, 3)
    theta = segnet.build(SMALL, 0)
    before = theta.values.copy()
    local = meta.train_local(theta, task, _tiny_cfg())
    assert np.array_equal(theta.values, before)
    assert not np.array_equal(local.values, before)


def test_zero_inner_epochs_gives_zero_update():
    ds = make_dataset(n_volumes=1, depth=6)
    from metamedseg.tasks import sample_volume_based
    theta = segnet.build(SMALL, 0)
    local = meta.train_local(theta, sample_volume_based(ds, 3), _tiny_cfg(inner_epochs=0))
    assert meta.make_update(theta, local).sq_dist == 0.0


@pytest.mark.parametrize("rule", ["aw", "idw"])
def test_meta_train_runs_and_logs(rule):
    theta, rows = meta.meta_train(_tiny_sources(), _tiny_cfg(update_rule=rule), arch=SMALL)
    assert len(rows) == 3
    assert set(rows[0]) == set(meta.LOG_HEADER)
    assert all(np.isfinite(r["mean_loss"]) for r in rows)
    if rule == "aw":
        assert rows[0]["weight_entropy"] == pytest.approx(np.log(2))
    assert np.isfinite(theta.values).all()


def test_meta_train_deterministic_and_worker_independent():
    a, ra = meta.meta_train(_tiny_sources(), _tiny_cfg(), arch=SMALL)
    b, rb = meta.meta_train(_tiny_sources(), _tiny_cfg(), arch=SMALL)
    c, _ = meta.meta_train(_tiny_sources(), _tiny_cfg(workers=2), arch=SMALL)
    assert a.values.tobytes() == b.values.tobytes() == c.values.tobytes()
    assert ra == rb


def test_meta_train_callback_sees_tasks():
    seen = []
    meta.meta_train(_tiny_sources(), _tiny_cfg(), arch=SMALL, callback=lambda row, ts: seen.append(len(ts)))
    assert seen == [2, 2, 2]


@pytest.mark.filterwarnings("ignore:overflow")
def test_meta_train_divergence_reports_epoch():
    with pytest.raises(TrainingDivergedError) as info:
        meta.meta_train(_tiny_sources(), _tiny_cfg(inner_lr=1e30, loss="iou"), arch=SMALL)
    assert info.value.epoch is not None


def test_meta_train_needs_sources():
    with pytest.raises(ConfigurationError):
        meta.meta_train({}, _tiny_cfg(), arch=SMALL)


def test_fine_tune_reduces_loss():
    ds = make_dataset(n_volumes=1, depth=10)
    from metamedseg.tasks import sample_volume_based
    task = sample_volume_based(ds, 10)
    cfg = meta.SupervisedConfig(epochs=15, lr=0.05, batch_size=5, seed=1)
    _, losses = meta.fine_tune_with_history(segnet.build(SMALL, 0), task.images, task.masks, cfg)
    assert np.mean(losses[-2:]) < np.mean(losses[:2])


def test_fine_tune_needs_shots():
    with pytest.raises(ConfigurationError):
        meta.fine_tune(segnet.build(SMALL, 0), np.zeros((0, 1, 8, 8)), np.zeros((0, 1, 8, 8)),
                       meta.SupervisedConfig())
