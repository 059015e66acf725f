"""Command-line entry point: generate, train, evaluate and map organ distances.

Every command resolves one flat configuration from, in increasing priority,
built-in defaults, an optional preset, a ``key=value`` file (``--config``),
``--set key=value`` pairs and the command's own flags.  The resolved
configuration is written next to the command's output so a run can be
repeated with ``--config <echoed file>``.
"""
import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from . import data, harness, meta, segnet
from .errors import ConfigurationError, DataError, MetaSegError, ProtocolError
from .losses import LossKind, LossSpec
from .meta import UpdateRule
from .seeding import derive_seed
from .tasks import TaskRule

log = logging.getLogger("metamedseg")


@dataclass(frozen=True)
class Key:
    kind: type
    default: object
    choices: tuple = ()
    help: str = ""


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _shots(text):
    text = str(text).strip()
    if text == "all":
        return "all"
    value = int(text)
    if value < 1:
        raise ValueError("shots must be >= 1 or 'all'")
    return value


LOSSES = tuple(k.value for k in LossKind)
RULES = tuple(r.value for r in UpdateRule)
TASK_RULES = tuple(r.value for r in TaskRule)

SCHEMA = {
    # paths and plumbing
    "seed": Key(int, 0),
    "spec": Key(str, "", help="benchmark spec (JSON); empty means the built-in benchmark"),
    "data": Key(str, ""),
    "target": Key(str, "cardiac"),
    "out": Key(str, ""),
    "log": Key(str, "", help="training-log CSV; default <out>.log.csv"),
    "ckpt": Key(str, "random"),
    "method": Key(str, "", help="method tag written to result rows"),
    "workers": Key(int, 1),
    "size": Key(int, 32),
    # architecture
    "base_width": Key(int, 8),
    "depth": Key(int, 3),
    # meta-training
    "meta_epochs": Key(int, 100),
    "tasks_per_epoch": Key(int, 5),
    "shots": Key(int, 15),
    "inner_lr": Key(float, 0.01),
    "meta_lr": Key(float, 0.01),
    "inner_epochs": Key(int, 4),
    "inner_batch": Key(int, 5),
    "weight_decay": Key(float, 0.003),
    "lr_decay": Key(float, 0.7),
    "decay_period": Key(int, 2),
    "rule": Key(str, "aw", RULES),
    "tasks": Key(str, "volume", TASK_RULES),
    "loss": Key(str, "bce", LOSSES),
    "invert_pos_weight": Key(_bool, False),
    # transfer baseline
    "transfer_epochs": Key(int, 20),
    "transfer_lr": Key(float, 0.001),
    "transfer_weight_decay": Key(float, 3e-5),
    "transfer_loss": Key(str, "bce", LOSSES),
    "transfer_decay_period": Key(int, 2),
    # fine-tuning and the evaluation protocol
    "finetune_epochs": Key(int, 20),
    "finetune_lr": Key(float, 0.005),
    "finetune_weight_decay": Key(float, 3e-5),
    "finetune_batch": Key(int, 5),
    "finetune_decay_period": Key(int, 2),
    "finetune_loss": Key(str, "iou", LOSSES),
    "eval_shots": Key(_shots, 15),
    "seeds": Key(int, 5),
    "test_fraction": Key(float, 0.5),
    # heatmap
    "pairs": Key(int, 100),
}

# Desk-scale learning rates and schedule; see README for why they differ from
# the defaults above.
PRESETS = {
    "full": {},
    "desk": {
        "inner_lr": 0.1,
        "meta_lr": 1.0,
        "decay_period": 20,
        "invert_pos_weight": True,
        "transfer_lr": 0.01,
        "finetune_lr": 0.2,
    },
}


def parse_value(key, text):
    if key not in SCHEMA:
        raise ConfigurationError(f"unknown config key {key!r}")
    spec = SCHEMA[key]
    try:
        value = spec.kind(text)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad value for {key}: {text!r} ({exc})") from None
    if spec.choices and value not in spec.choices:
        raise ConfigurationError(f"{key} must be one of {', '.join(spec.choices)}, got {value!r}")
    return value


def parse_pairs(lines, origin="<config>"):
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{origin}:{n}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def read_config_file(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_pairs(text.splitlines(), str(path))


def resolve(preset="full", config=None, sets=(), flags=None):
    cfg = {k: spec.default for k, spec in SCHEMA.items()}
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}")
    cfg.update(PRESETS[preset])
    if config:
        cfg.update(read_config_file(config))
    cfg.update(parse_pairs(sets, "--set"))
    for key, value in (flags or {}).items():
        if value is not None:
            cfg[key] = parse_value(key, value)
    return cfg


def format_config(cfg):
    return "".join(f"{k}={cfg[k]}\n" for k in SCHEMA)


def echo_config(cfg, path, blank=()):
    """Write the resolved config; ``blank`` keys are left empty (e.g. self-referential paths)."""
    Path(path).write_text(format_config({**cfg, **dict.fromkeys(blank, "")}))
    log.info("resolved config written to %s", path)


# ---------------------------------------------------------------- config -> library objects

def arch_of(cfg):
    return segnet.ArchDescriptor(1, cfg["base_width"], cfg["depth"], 1)


def meta_config(cfg):
    return meta.MetaConfig(
        meta_epochs=cfg["meta_epochs"], tasks_per_epoch=cfg["tasks_per_epoch"], shots=cfg["shots"],
        inner_lr=cfg["inner_lr"], meta_lr=cfg["meta_lr"], inner_epochs=cfg["inner_epochs"],
        inner_batch=cfg["inner_batch"], weight_decay=cfg["weight_decay"], lr_decay=cfg["lr_decay"],
        decay_period=cfg["decay_period"], update_rule=cfg["rule"], task_rule=cfg["tasks"],
        loss=LossSpec(cfg["loss"], invert_pos_weight=cfg["invert_pos_weight"]),
        seed=cfg["seed"], workers=cfg["workers"])


def transfer_config(cfg):
    return meta.transfer_config(
        epochs=cfg["transfer_epochs"], lr=cfg["transfer_lr"], weight_decay=cfg["transfer_weight_decay"],
        loss=LossSpec(cfg["transfer_loss"], invert_pos_weight=cfg["invert_pos_weight"]),
        decay_period=cfg["transfer_decay_period"], seed=derive_seed(cfg["seed"], "train", 1 << 20))


def finetune_config(cfg):
    return meta.SupervisedConfig(
        epochs=cfg["finetune_epochs"], lr=cfg["finetune_lr"], weight_decay=cfg["finetune_weight_decay"],
        batch_size=cfg["finetune_batch"], decay_period=cfg["finetune_decay_period"],
        loss=LossSpec(cfg["finetune_loss"], invert_pos_weight=cfg["invert_pos_weight"]))


def protocol_config(cfg):
    return harness.ProtocolConfig(shots=cfg["eval_shots"], selections=cfg["seeds"],
                                  test_fraction=cfg["test_fraction"], seed=cfg["seed"],
                                  finetune=finetune_config(cfg))


def load_datasets(cfg):
    if not cfg["data"]:
        raise ConfigurationError("a data directory is required (--data)")
    volumes, thresholds = data.read_benchmark(cfg["data"])
    return data.prepare_datasets(volumes, cfg["size"], thresholds)


def split_sources(datasets, target):
    """Sources are every dataset whose organ differs from the target's."""
    if target not in datasets:
        raise DataError(f"target {target!r} not among datasets {sorted(datasets)}")
    organ = datasets[target].organ
    sources = {k: v for k, v in datasets.items() if v.organ != organ}
    if not sources:
        raise DataError("no source datasets left after excluding the target organ")
    return sources, datasets[target]


def _out(cfg, what):
    if not cfg["out"]:
        raise ConfigurationError(f"an output path is required for {what} (--out)")
    path = Path(cfg["out"])
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_log_csv(rows, path, header):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------- commands

def cmd_generate(cfg):
    out = Path(_out(cfg, "generate"))
    families = data.load_family_spec(cfg["spec"]) if cfg["spec"] else data.default_benchmark()
    volumes = data.generate_benchmark(families, derive_seed(cfg["seed"], "data"))
    data.write_benchmark(volumes, families, out)
    # the directory itself is the output, so the echo stays location-independent
    echo_config(cfg, out / "config.txt", blank=("out",))
    log.info("wrote %d volumes of %d datasets to %s", len(volumes),
             sum(f.modalities for f in families), out)


def _volume_guard(cfg):
    def check(row, tasks):
        if cfg["tasks"] == TaskRule.VOLUME.value:
            for t in tasks:
                if len(set(t.volume_ids)) != 1:
                    raise ProtocolError(f"volume task mixes volumes {sorted(set(t.volume_ids))}")
            log.debug("epoch %d: every task drawn from a single volume", row["epoch"])
        log.info("meta-epoch %d  loss %.4f  |d|^2 %.4g", row["epoch"], row["mean_loss"], row["mean_sq_dist"])
    return check


def cmd_meta_train(cfg):
    out = _out(cfg, "meta-train")
    sources, _ = split_sources(load_datasets(cfg), cfg["target"])
    log.info("meta-training on %s (target %s excluded)", ", ".join(sorted(sources)), cfg["target"])
    theta = segnet.build(arch_of(cfg), derive_seed(cfg["seed"], "init"))
    theta, rows = meta.meta_train(sources, meta_config(cfg), theta=theta, callback=_volume_guard(cfg))
    segnet.save_checkpoint(theta, out)
    write_log_csv(rows, cfg["log"] or f"{out}.log.csv", meta.LOG_HEADER)
    echo_config(cfg, f"{out}.config.txt")


def cmd_transfer_train(cfg):
    out = _out(cfg, "transfer-train")
    sources, target = split_sources(load_datasets(cfg), cfg["target"])
    init = segnet.build(arch_of(cfg), derive_seed(cfg["seed"], "init"))
    params, history = harness.train_transfer_baseline(sources, transfer_config(cfg), init,
                                                      target_ids=[target.dataset_id], return_history=True)
    segnet.save_checkpoint(params, out)
    write_log_csv([{"epoch": i, "mean_loss": v} for i, v in enumerate(history)],
                  cfg["log"] or f"{out}.log.csv", ("epoch", "mean_loss"))
    echo_config(cfg, f"{out}.config.txt")


def load_init(cfg):
    arch = arch_of(cfg)
    if cfg["ckpt"] == "random":
        return segnet.build(arch, derive_seed(cfg["seed"], "init"))
    try:
        return segnet.load_checkpoint(cfg["ckpt"], expected_arch=arch)
    except FileNotFoundError:
        raise DataError(f"checkpoint {cfg['ckpt']} not found") from None


def cmd_finetune_eval(cfg):
    out = _out(cfg, "finetune-eval")
    datasets = load_datasets(cfg)
    _, target = split_sources(datasets, cfg["target"])
    init = load_init(cfg)
    protocol = protocol_config(cfg)
    tune, test = harness.split_target(target, protocol.seed, protocol.test_fraction)
    seeds, ious = harness.evaluate_init(init, tune, test, protocol)
    method = cfg["method"] or ("random-init" if cfg["ckpt"] == "random" else Path(cfg["ckpt"]).stem)
    result = harness.ExperimentResult(method, "-", "-", seeds, ious)
    harness.write_results_csv([result], out)
    echo_config(cfg, f"{out}.config.txt")
    log.info("%s on %s: IoU %.2f +- %.2f", method, cfg["target"], result.mean, result.std)
    print(f"{method}\t{result.mean:.2f}\t{result.std:.2f}")


def cmd_heatmap(cfg):
    prefix = _out(cfg, "heatmap")
    matrix = harness.distance_heatmap(load_datasets(cfg), cfg["pairs"], cfg["seed"])
    harness.write_distance_csv(matrix, f"{prefix}.csv")
    harness.write_pgm(matrix, f"{prefix}.pgm")
    echo_config(cfg, f"{prefix}.config.txt")


def ablation_grid():
    return [(rule, tasks, loss) for rule in RULES for tasks in TASK_RULES for loss in LOSSES]


def run_ablation(cfg, datasets=None):
    """Meta-train and evaluate every update-rule x task-rule x loss combination."""
    datasets = datasets if datasets is not None else load_datasets(cfg)
    sources, target = split_sources(datasets, cfg["target"])
    protocol = protocol_config(cfg)
    tune, test = harness.split_target(target, protocol.seed, protocol.test_fraction)
    init = segnet.build(arch_of(cfg), derive_seed(cfg["seed"], "init"))
    results = []
    for rule, tasks, loss in ablation_grid():
        mcfg = meta_config({**cfg, "rule": rule, "tasks": tasks, "loss": loss})
        theta, _ = meta.meta_train(sources, mcfg, theta=init)
        seeds, ious = harness.evaluate_init(theta, tune, test, protocol)
        results.append(harness.ExperimentResult(f"meta-{rule}:{loss}", tasks, rule, seeds, ious))
        log.info("%-4s %-8s %-8s IoU %.2f", rule, tasks, loss, results[-1].mean)
    return results


def cmd_ablation(cfg):
    out = _out(cfg, "ablation")
    harness.write_results_csv(run_ablation(cfg), out)
    echo_config(cfg, f"{out}.config.txt")


COMMANDS = {
    "generate": (cmd_generate, "write a synthetic benchmark as MMVL volumes",
                 {"spec": "--spec", "out": "--out", "seed": "--seed"}),
    "meta-train": (cmd_meta_train, "meta-train an initialisation on the source datasets",
                   {"data": "--data", "target": "--target", "rule": "--rule", "tasks": "--tasks",
                    "loss": "--loss", "out": "--out", "seed": "--seed", "workers": "--workers",
                    "meta_epochs": "--epochs", "log": "--log"}),
    "transfer-train": (cmd_transfer_train, "train the pooled-source transfer baseline",
                       {"data": "--data", "target": "--target", "out": "--out", "seed": "--seed",
                        "transfer_epochs": "--epochs", "log": "--log"}),
    "finetune-eval": (cmd_finetune_eval, "fine-tune an initialisation on target shots and score it",
                      {"ckpt": "--ckpt", "data": "--data", "target": "--target", "eval_shots": "--shots",
                       "seeds": "--seeds", "out": "--out", "seed": "--seed", "method": "--method"}),
    "heatmap": (cmd_heatmap, "average inter-dataset slice distances as CSV and PGM",
                {"data": "--data", "pairs": "--pairs", "out": "--out", "seed": "--seed"}),
    "ablation": (cmd_ablation, "update rule x task rule x loss grid",
                 {"data": "--data", "target": "--target", "out": "--out", "seed": "--seed",
                  "meta_epochs": "--epochs"}),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="metamedseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_fn, help_text, flags) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--preset", default="full", choices=sorted(PRESETS))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any configuration key (repeatable)")
        for key, flag in flags.items():
            spec = SCHEMA[key]
            p.add_argument(flag, dest=key, default=None, choices=spec.choices or None, help=spec.help or None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose + 1, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    fn, _help, flags = COMMANDS[args.command]
    try:
        cfg = resolve(args.preset, args.config, args.set, {k: getattr(args, k) for k in flags})
        fn(cfg)
    except MetaSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return DataError.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigurationError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
