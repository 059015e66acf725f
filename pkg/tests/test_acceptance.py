"""Acceptance checks, one marker per criterion.

Run on its own with ``pytest tests/test_acceptance.py -v``; the terminal
summary ends with one PASS/FAIL line per criterion.
"""
import itertools
import json
import time
import zlib

import numpy as np
import pytest

from metamedseg import autodiff as ad
from metamedseg import cli, data, harness, meta, segnet, tasks
from metamedseg.losses import LossKind, LossSpec, soft_iou
from metamedseg.meta import TaskUpdate, UpdateRule
from metamedseg.seeding import derive_seed

import conftest
from test_autodiff import OPS, _random_case

ROOT_SEED = 0
TARGET = "cardiac"


def c(number, title):
    return pytest.mark.criterion(number, title)


@pytest.fixture(scope="module")
def benchmark():
    """Default synthetic benchmark, preprocessed at 32x32."""
    return data.benchmark_datasets(data.default_benchmark(), derive_seed(ROOT_SEED, "data"))


# ---------------------------------------------------------------- 1. gradients

C1 = c(1, "gradient correctness of every op and loss")


def _loss_case(kind, rng):
    shape = (int(rng.integers(1, 3)), 1, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    pred = rng.uniform(0.05, 0.95, size=shape)
    target = (rng.uniform(size=shape) < 0.4).astype(float)
    target.flat[0], target.flat[1] = 1.0, 0.0
    spec = LossSpec(kind)
    return (lambda p: spec(p, target)), [pred]


def _strided_conv_case(rng):
    c_in, f = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    x = rng.standard_normal((1, c_in, 9, 9))
    return (lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1)), [
        x, rng.standard_normal((f, c_in, 3, 3)), rng.standard_normal(f)]


@C1
def test_c1_gradients_of_every_op_and_loss():
    start = time.perf_counter()
    worst = {}
    for name in OPS + ["conv2d_stride2"] + [f"loss:{k.value}" for k in LossKind]:
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        errs = []
        for _ in range(20):
            if name.startswith("loss:"):
                op, arrays = _loss_case(name[5:], rng)
            elif name == "conv2d_stride2":
                op, arrays = _strided_conv_case(rng)
            else:
                op, arrays = _random_case(name, rng)
            errs.append(ad.gradcheck(op, [np.asarray(a, dtype=np.float64) for a in arrays], eps=1e-5))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - start
    conftest.note(1, f"worst relative error {max(worst.values()):.2e} over {len(worst)} ops, {elapsed:.1f}s")
    assert max(worst.values()) < 1e-4, {k: v for k, v in worst.items() if v >= 1e-4}
    assert elapsed < 120


# ---------------------------------------------------------------- 2. aggregation

C2 = c(2, "aggregation algebra")


@C2
def test_c2_idw_weights_exact():
    w = meta.compute_idw_weights([TaskUpdate(np.zeros(1), sq_dist=1.0), TaskUpdate(np.zeros(1), sq_dist=4.0)])
    assert w.tolist() == [0.8, 0.2]


@C2
def test_c2_idw_equals_aw_for_equal_distances():
    rng = np.random.default_rng(1)
    arch = segnet.ArchDescriptor()
    theta = segnet.build(arch, 0, dtype=np.float64)
    for _ in range(10):
        deltas = rng.normal(size=(5, arch.n_params))
        deltas /= np.linalg.norm(deltas, axis=1, keepdims=True)
        ups = [meta.make_update(theta, theta.replace(theta.values + d)) for d in deltas]
        diff = meta.aggregate_aw(theta, ups, 0.7).values - meta.aggregate_idw(theta, ups, 0.7).values
        assert np.abs(diff).max() < 1e-9


@C2
def test_c2_weights_sum_to_one():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        d2 = 10.0 ** rng.uniform(-12, 8, size=rng.integers(1, 20))
        w = meta.compute_idw_weights([TaskUpdate(np.zeros(1), sq_dist=x) for x in d2])
        assert abs(w.sum() - 1) <= 1e-9


@C2
@pytest.mark.parametrize("rule", list(UpdateRule))
def test_c2_permutation_invariance(rule):
    rng = np.random.default_rng(3)
    arch = segnet.ArchDescriptor()
    theta = segnet.build(arch, 0)
    ups = [meta.make_update(theta, theta.replace(theta.values + rng.normal(scale=0.01, size=arch.n_params)))
           for _ in range(4)]
    ref = meta.aggregate(theta, ups, 0.5, rule).values
    for perm in itertools.permutations(ups):
        assert np.abs(meta.aggregate(theta, list(perm), 0.5, rule).values - ref).max() <= np.spacing(
            np.abs(ref)).max()


@C2
@pytest.mark.parametrize("rule", list(UpdateRule))
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_c2_single_task_full_step_is_task_model(rule, dtype):
    rng = np.random.default_rng(4)
    arch = segnet.ArchDescriptor()
    theta = segnet.ParamVector(rng.normal(size=arch.n_params).astype(dtype), arch)
    local = segnet.ParamVector(rng.normal(size=arch.n_params).astype(dtype), arch)
    out = meta.aggregate(theta, [meta.make_update(theta, local)], 1.0, rule).values
    ulps = np.abs(out.astype(np.float64) - local.values) / np.spacing(np.abs(local.values))
    assert ulps.max() <= 1


# ---------------------------------------------------------------- 3. task rules

C3 = c(3, "task-rule contracts")


@C3
def test_c3_volume_rule_thirty_fifteen():
    assert tasks.stepped_indices(np.arange(30), 15).tolist() == list(range(0, 30, 2))


@C3
def test_c3_volume_tasks_never_mix_volumes(benchmark):
    sources, _ = cli.split_sources(benchmark, TARGET)
    weights = meta.source_weights(sources)
    rng = np.random.default_rng(5)
    for _ in range(200):
        for t in tasks.sample_meta_batch(sources, weights, 5, 15, "volume", rng):
            assert len(set(t.volume_ids)) == 1
            assert len({s.slice_index for s in t.shots}) == len(t)


@C3
def test_c3_weighted_sampling_frequencies(benchmark):
    sources, _ = cli.split_sources(benchmark, TARGET)
    weights = meta.source_weights(sources)
    assert any(ds.z == 2 for ds in sources.values())
    rng = np.random.default_rng(6)
    counts = dict.fromkeys(sources, 0)
    batches, per = 2000, 5
    for _ in range(batches):
        for t in tasks.sample_meta_batch(sources, weights, per, 15, "volume", rng):
            counts[t.dataset_id] += 1
    rel = {k: abs(counts[k] / (batches * per) - weights[k]) / weights[k] for k in sources}
    conftest.note(3, "max relative frequency error " + f"{max(rel.values()):.3f}")
    assert max(rel.values()) <= 0.10


# ---------------------------------------------------------------- 4. loss identities

C4 = c(4, "loss identities")


@C4
def test_c4_soft_iou_on_binary_is_set_iou():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a = (rng.uniform(size=(2, 1, 16, 16)) < rng.uniform(0.1, 0.9)).astype(float)
        b = (rng.uniform(size=(2, 1, 16, 16)) < rng.uniform(0.1, 0.9)).astype(float)
        exact = np.logical_and(a, b).sum() / np.logical_or(a, b).sum()
        assert abs(float(soft_iou(a, b).data) - exact) < 1e-6


@C4
def test_c4_log_dice_term():
    # the identity holds for the smoothing-free IoU; the loss itself uses a 1e-6 smoother
    rng = np.random.default_rng(8)
    for _ in range(200):
        p = rng.uniform(0.01, 0.99, size=(2, 1, 8, 8))
        t = (rng.uniform(size=p.shape) < 0.4).astype(float)
        x = (p * t).sum()
        u = (p + t - p * t).sum()
        iou = float(soft_iou(p, t, eps=1e-300).data)
        assert abs(2 * iou / (iou + 1) - 2 * x / (x + u)) < 1e-9


@C4
@pytest.mark.parametrize("kind", list(LossKind))
def test_c4_losses_vanish_at_perfect_prediction(kind):
    t = np.zeros((2, 1, 16, 16))
    t[:, :, 4:12, 3:9] = 1
    assert 0 <= float(LossSpec(kind)(t.copy(), t).data) < 1e-5


# ---------------------------------------------------------------- 5. end-to-end

C5 = c(5, "meta-trained init beats random and matches transfer")


@pytest.fixture(scope="module")
def end_to_end(benchmark):
    cfg = cli.resolve("desk", sets=[f"seed={ROOT_SEED}"])
    sources, target = cli.split_sources(benchmark, TARGET)
    assert len({ds.organ for ds in sources.values()}) == 4
    init = segnet.build(cli.arch_of(cfg), derive_seed(ROOT_SEED, "init"))
    start = time.perf_counter()
    inits = {
        "random-init": init,
        "transfer": harness.train_transfer_baseline(sources, cli.transfer_config(cfg), init,
                                                    target_ids=[target.dataset_id]),
        "meta-aw": meta.meta_train(sources, cli.meta_config(cfg), theta=init)[0],
    }
    results = harness.run_protocol(sources, target, list(inits), cli.meta_config(cfg),
                                   protocol=cli.protocol_config(cfg), arch=cli.arch_of(cfg), inits=inits)
    elapsed = time.perf_counter() - start
    scores = {r.method: r for r in results}
    conftest.note(5, "  ".join(f"{m} {r.mean:.2f}+-{r.std:.2f}" for m, r in scores.items())
                  + f"  runtime {elapsed / 60:.1f} min")
    return scores, elapsed


@C5
def test_c5_protocol_shape(end_to_end):
    scores, _ = end_to_end
    assert all(len(r.ious) == 5 for r in scores.values())
    assert scores["meta-aw"].task_rule == "volume" and scores["meta-aw"].update_rule == "aw"


@C5
def test_c5_meta_beats_random(end_to_end):
    scores, _ = end_to_end
    assert scores["meta-aw"].mean >= scores["random-init"].mean + 5


@C5
def test_c5_meta_matches_transfer(end_to_end):
    scores, _ = end_to_end
    assert scores["meta-aw"].mean >= scores["transfer"].mean - 1


@C5
def test_c5_runtime(end_to_end):
    assert end_to_end[1] < 30 * 60


# ---------------------------------------------------------------- 6. ablation harness

C6 = c(6, "ablation grid completes without divergence")

ABLATION_SETTINGS = ["meta_epochs=20", "tasks_per_epoch=5", "shots=5", "inner_epochs=1", "base_width=4",
                     "depth=2", "seeds=1", "finetune_epochs=5"]


@C6
def test_c6_ablation_grid(tmp_path, benchmark):
    cfg = cli.resolve("desk", sets=ABLATION_SETTINGS)
    start = time.perf_counter()
    results = cli.run_ablation(cfg, datasets=benchmark)
    path = tmp_path / "ablation.csv"
    harness.write_results_csv(results, path)
    rows = harness.read_results_csv(path)
    conftest.note(6, f"{len(rows)} rows in {time.perf_counter() - start:.0f}s; IoU range "
                     f"{min(float(r['iou']) for r in rows):.1f}..{max(float(r['iou']) for r in rows):.1f}")
    assert len(rows) == 20
    combos = {(r["update_rule"], r["task_rule"], r["method"].split(":")[1]) for r in rows}
    assert combos == set(cli.ablation_grid())
    assert all(np.isfinite(float(r["iou"])) and 0 <= float(r["iou"]) <= 100 for r in rows)


# ---------------------------------------------------------------- 7. heatmap

C7 = c(7, "distance heatmap")


@pytest.fixture(scope="module")
def heatmap(benchmark):
    return harness.distance_heatmap(benchmark, 100, ROOT_SEED)


@C7
def test_c7_symmetric_zero_diagonal(heatmap):
    d = heatmap.distances
    assert np.abs(d - d.T).max() <= 1e-9
    assert np.all(np.diag(d) == 0)


@C7
def test_c7_deterministic(benchmark, heatmap):
    assert harness.distance_heatmap(benchmark, 100, ROOT_SEED).distances.tobytes() == heatmap.distances.tobytes()


@C7
def test_c7_within_family_smaller_than_cross_family(benchmark, heatmap):
    ids = heatmap.dataset_ids
    within = {did: harness.within_distance(benchmark[did], 100, derive_seed(ROOT_SEED, "heatmap", i))
              for i, did in enumerate(ids)}
    cells = ok = 0
    for a, b in itertools.permutations(range(len(ids)), 2):
        if benchmark[ids[a]].organ == benchmark[ids[b]].organ:
            continue
        cells += 1
        ok += within[ids[a]] < heatmap.distances[a, b]
    conftest.note(7, f"{ok}/{cells} cross-family cells exceed the row's within-family distance")
    assert ok / cells >= 0.95


# ---------------------------------------------------------------- 8. reproducibility

C8 = c(8, "reproducibility")


def _pipeline(root, spec):
    bench = root / "data"
    small = ["--set", "meta_epochs=3", "--set", "finetune_epochs=2", "--set", "seeds=2"]
    steps = [
        ["generate", "--spec", str(spec), "--out", str(bench), "--seed", "11"],
        ["meta-train", "--data", str(bench), "--out", str(root / "meta.mmsg"), "--preset", "desk"] + small,
        ["finetune-eval", "--ckpt", str(root / "meta.mmsg"), "--data", str(bench), "--out", str(root / "res.csv"),
         "--preset", "desk"] + small,
        ["heatmap", "--data", str(bench), "--pairs", "20", "--out", str(root / "hm")],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    return {name: (root / name).read_bytes() for name in ("meta.mmsg", "meta.mmsg.log.csv", "res.csv", "hm.csv")}


@C8
def test_c8_two_runs_byte_identical(tmp_path):
    fams = [data.family_to_dict(f) for f in data.default_benchmark()]
    for f in fams:
        f.update(volumes=4, slices=12)
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"families": fams}))
    first = _pipeline(tmp_path / "a", spec)
    second = _pipeline(tmp_path / "b", spec)
    assert first == second


@C8
def test_c8_checkpoint_round_trip(tmp_path):
    params = segnet.build(segnet.ArchDescriptor(), 9)
    segnet.save_checkpoint(params, tmp_path / "a.mmsg")
    loaded = segnet.load_checkpoint(tmp_path / "a.mmsg", segnet.ArchDescriptor())
    assert loaded.values.tobytes() == params.values.tobytes()
    segnet.save_checkpoint(loaded, tmp_path / "b.mmsg")
    assert (tmp_path / "a.mmsg").read_bytes() == (tmp_path / "b.mmsg").read_bytes()


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
