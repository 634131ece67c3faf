"""Command-line pipeline: prepare, train, attack, evaluate, ablate, slice.

Artifacts live under the output directory::

    data/{train,val,test}.npz, data/meta.json
    models/<name>.ckpt, <name>.history.csv, <name>.json
    attacks/<attacker>_<kind>.{bin,npy,json}
    reports/matrix.{csv,json}, reports/ablation.csv, reports/ablation_long.csv
    slices/{wide,zoom}/slice.csv, slice_<model>.ppm

Every JSON sidecar records the hash of the configuration it was built from.
A command whose output already carries the current hash does nothing; one
whose inputs carry a different hash stops with exit code 5.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import attacks, boundary, zoo
from .config import ConfigFileError, dump_config, fast_profile, load_config
from .data import Dataset, IngestionError, load_cifar10, synthetic_blobs, train_val_split
from .distill import ConfigError, DivergenceError, KDConfig, TrainHistory, TrainSchedule, train_student
from .evaluation import (
    ABLATION_COLUMNS,
    EvalReport,
    accuracy,
    asr,
    format_table,
    run_ablation,
    write_report,
)
from .nn import CheckpointError, load_checkpoint, save_checkpoint

log = logging.getLogger("kdtransfer")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CALIBRATION, EXIT_MISSING = 0, 2, 3, 4, 5

# the five trained networks of the main experiment
SUPERVISED = {"teacher-residual": "teacher-residual", "teacher-dense": "teacher-dense",
              "blackbox": "blackbox-multibranch"}
STUDENTS = ("student-curriculum", "student-joint")
MODEL_NAMES = tuple(SUPERVISED) + STUDENTS
ATTACKERS = (("blackbox", "self"), ("teacher-residual", "baseline"), ("teacher-dense", "baseline"),
             ("ensemble", "ensemble"), ("student-curriculum", "student"), ("student-joint", "student"))


class MissingArtifact(RuntimeError):
    pass


# -- small helpers --------------------------------------------------------


def _path(config, *parts):
    return os.path.join(config.output_dir, *parts)


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        return None


def _write_json(path, payload):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)


def _require(path, what):
    meta = _read_json(path)
    if meta is None:
        raise MissingArtifact(f"missing {what}: {path}")
    return meta


def _check_hash(meta, expected, what, path):
    if meta.get("config_hash") != expected:
        raise MissingArtifact(
            f"{what} at {path} was built from config {meta.get('config_hash')}, current is {expected}; "
            f"rerun the producing command")


# -- hashes ---------------------------------------------------------------


def data_hash(config):
    return config.section_hash("data")


def model_hash(config, name):
    base = [data_hash(config), config.section_hash("train"), str(config.seed)]
    if name in SUPERVISED:
        return _digest(base + [name])
    strategy = name.split("-", 1)[1] if name in STUDENTS else None
    teachers = [model_hash(config, t) for t in ("teacher-residual", "teacher-dense")]
    d = config.distill
    return _digest(base + teachers + [name, strategy, d.alpha, d.tau, d.switch_period, d.scale_tau2])


def ablation_model_hash(config, kd):
    teachers = [model_hash(config, t) for t in ("teacher-residual", "teacher-dense")]
    return _digest([data_hash(config), config.section_hash("train"), str(config.seed)] + teachers
                   + [kd.label, kd.switch_period, kd.scale_tau2])


def attack_hash(config, attacker, kind):
    members = ("teacher-residual", "teacher-dense") if attacker == "ensemble" else (attacker,)
    return _digest([model_hash(config, m) for m in members] + [config.section_hash("attack"), kind])


def _digest(parts):
    return hashlib.sha256(json.dumps(parts, default=str).encode()).hexdigest()[:16]


# -- data -----------------------------------------------------------------


def build_datasets(config):
    d = config.data
    if d.source == "cifar10":
        full_train, test = load_cifar10(d.cifar10_dir)
    else:
        s = d.synthetic
        params = dict(num_classes=s.num_classes, seed=s.seed, separation=s.separation,
                      noise_std=s.noise_std, shift=s.shift)
        full_train = synthetic_blobs(n_per_class=s.train_per_class, split="train", **params)
        test = synthetic_blobs(n_per_class=s.test_per_class, split="test", **params)
    train, val = train_val_split(full_train, d.val_fraction, seed=d.split_seed)
    if d.test_limit is not None:
        test = test.subset(np.arange(min(d.test_limit, len(test))))
    return train, val, test


def cmd_prepare(config):
    meta_path = _path(config, "data", "meta.json")
    h = data_hash(config)
    meta = _read_json(meta_path)
    if meta and meta.get("config_hash") == h:
        log.info("prepare: cache hit (%s)", h)
        return meta
    train, val, test = build_datasets(config)
    for ds in (train, val, test):
        path = _path(config, "data", f"{ds.split}.npz")
        os.makedirs(os.path.dirname(path), exist_ok=True)
        np.savez(path, images=ds.images, labels=ds.labels, num_classes=ds.num_classes)
    mean, std = train.channel_stats()
    meta = {"config_hash": h, "data": config.to_dict()["data"], "mean": mean.tolist(),
            "std": std.tolist(), "sizes": {"train": len(train), "val": len(val), "test": len(test)}}
    _write_json(meta_path, meta)
    log.info("prepare: %d train / %d val / %d test, mean=%s std=%s", len(train), len(val), len(test),
             np.round(mean, 2).tolist(), np.round(std, 2).tolist())
    return meta


def load_prepared(config):
    meta_path = _path(config, "data", "meta.json")
    meta = _require(meta_path, "prepared data (run 'prepare')")
    _check_hash(meta, data_hash(config), "prepared data", meta_path)
    out = {}
    for split in ("train", "val", "test"):
        with np.load(_path(config, "data", f"{split}.npz")) as z:
            out[split] = Dataset(z["images"], z["labels"], split, int(z["num_classes"]))
    return out, meta


# -- models ---------------------------------------------------------------


def _schedule(config, lr):
    t = config.train
    return TrainSchedule(max_epochs=t.max_epochs, warmup_epochs=t.warmup_epochs, max_lr=lr,
                         patience=t.patience, plateau_tol=t.plateau_tol, batch_size=t.batch_size,
                         weight_decay=t.weight_decay)


def _seeds(config):
    return tuple(config.seed + s for s in config.train.seeds)


def _save_model(config, name, model, history, extra):
    os.makedirs(_path(config, "models"), exist_ok=True)
    save_checkpoint(model, _path(config, "models", f"{name}.ckpt"))
    history.to_csv(_path(config, "models", f"{name}.history.csv"))
    _write_json(_path(config, "models", f"{name}.json"),
                {"name": name, "seed": history.seed, "best_epoch": history.best_epoch,
                 "best_val_acc": history.best_val_acc, "epochs_run": len(history),
                 "checksum": model.checksum(), **extra})


def load_model(config, name, expected_hash=None):
    meta_path = _path(config, "models", f"{name}.json")
    meta = _require(meta_path, f"model '{name}' (run 'train {name}')")
    _check_hash(meta, expected_hash or model_hash(config, name), f"model '{name}'", meta_path)
    ckpt = _path(config, "models", f"{name}.ckpt")
    if not os.path.exists(ckpt):
        raise MissingArtifact(f"missing checkpoint for '{name}': {ckpt}")
    model = load_checkpoint(ckpt)
    model.name = name
    return model


def _is_current(config, name, h):
    meta = _read_json(_path(config, "models", f"{name}.json"))
    return bool(meta and meta.get("config_hash") == h and os.path.exists(_path(config, "models", f"{name}.ckpt")))


def _flush_divergence(config, name, exc):
    if exc.history is not None:
        os.makedirs(_path(config, "models"), exist_ok=True)
        exc.history.to_csv(_path(config, "models", f"{name}.diverged.history.csv"))


def train_supervised_role(config, name, data, meta):
    """Train over the lr grid and seed list, keep the best validation accuracy."""
    role = SUPERVISED[name]
    width = config.train.width
    best = None
    for lr in config.train.lr_grid:
        for seed in _seeds(config):
            model = zoo.build(role, seed=seed, width=width, mean=meta["mean"], std=meta["std"], name=name)
            try:
                model, history = zoo.train_supervised(model, (data["train"], data["val"]),
                                                      _schedule(config, lr), seed=seed, log=log.info)
            except DivergenceError as exc:
                _flush_divergence(config, name, exc)
                raise
            if best is None or history.best_val_acc > best[1].best_val_acc:
                best = (model, history, lr)
    return best


def train_student_variant(config, name, kd_fields, data, meta):
    teachers = [load_model(config, t) for t in ("teacher-residual", "teacher-dense")]
    width = config.train.width

    def factory(seed):
        return zoo.build("student-plain", seed=seed, width=width, mean=meta["mean"], std=meta["std"], name=name)

    d = config.distill
    best = None
    for lr in config.train.lr_grid:
        kd = KDConfig(switch_period=d.switch_period, seeds=_seeds(config), schedule=_schedule(config, lr),
                      scale_tau2=d.scale_tau2, **kd_fields)
        try:
            student, history = train_student(kd, teachers, (data["train"], data["val"]), factory, log=log.info)
        except DivergenceError as exc:
            _flush_divergence(config, name, exc)
            raise
        if best is None or history.best_val_acc > best[1].best_val_acc:
            best = (student, history, lr)
    return best


def cmd_train(config, target="all"):
    data, meta = load_prepared(config)
    names = MODEL_NAMES if target == "all" else (target,)
    for name in names:
        if name not in MODEL_NAMES:
            raise ConfigFileError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)} or 'all'")
        h = model_hash(config, name)
        if _is_current(config, name, h):
            log.info("train %s: up to date (%s)", name, h)
            continue
        if name in SUPERVISED:
            model, history, lr = train_supervised_role(config, name, data, meta)
            extra = {"role": SUPERVISED[name]}
        else:
            strategy = name.split("-", 1)[1]
            model, history, lr = train_student_variant(
                config, name, dict(strategy=strategy, alpha=config.distill.alpha, tau=config.distill.tau),
                data, meta)
            extra = {"role": "student-plain", "strategy": strategy, "alpha": config.distill.alpha,
                     "tau": config.distill.tau}
        test_acc = accuracy(model, data["test"])
        _save_model(config, name, model, history,
                    {"config_hash": h, "max_lr": lr, "test_acc": test_acc, "params": model.num_params, **extra})
        log.info("train %s: seed=%d lr=%g val_acc=%.4f test_acc=%.4f", name, history.seed, lr,
                 history.best_val_acc, test_acc)


# -- attacks --------------------------------------------------------------


def attacker_model(config, name):
    if name == "ensemble":
        members = [load_model(config, t) for t in ("teacher-residual", "teacher-dense")]
        return attacks.Ensemble(members, mode=config.attack.ensemble_mode, name="ensemble")
    return load_model(config, name)


def _calibrate(config, kind, model, images, labels):
    a = config.attack
    eps, achieved, trace = attacks.calibrate_epsilon(
        kind, model, images, labels, target_rmsd=a.rmsd_target, tolerance=a.rmsd_tolerance,
        max_bisections=a.max_bisections, iterations=a.iterations, batch_size=a.batch_size)
    return eps, achieved, len(trace)


def cmd_attack(config, attacker="all", kind="all"):
    data, _ = load_prepared(config)
    test = data["test"]
    a = config.attack
    names = [n for n, _ in ATTACKERS] if attacker == "all" else [attacker]
    kinds = list(a.kinds) if kind == "all" else [kind]
    for name in names:
        if name not in dict(ATTACKERS):
            raise ConfigFileError(f"unknown attacker {name!r}")
        model = None
        for k in kinds:
            if k not in attacks.KINDS:
                raise ConfigFileError(f"unknown attack kind {k!r}")
            stem = _path(config, "attacks", f"{name}_{k}")
            h = attack_hash(config, name, k)
            meta = _read_json(stem + ".json")
            if meta and meta.get("config_hash") == h:
                log.info("attack %s/%s: up to date", name, k)
                continue
            model = model or attacker_model(config, name)
            fixed = a.epsilons.get(f"{name}/{k}", a.epsilons.get(k))
            if fixed is not None:
                eps, calib = float(fixed), {"calibrated": False}
            else:
                n = min(a.calibration_samples, len(test))
                eps, achieved, steps = _calibrate(config, k, model, test.images[:n], test.labels[:n])
                calib = {"calibrated": True, "calibration_samples": n, "calibration_rmsd": achieved,
                         "calibration_evaluations": steps}
            spec = attacks.AttackSpec(k, eps, iterations=a.iterations)
            out = attacks.generate(model, test.images, test.labels, spec, batch_size=a.batch_size)
            if calib["calibrated"] and abs(out.mean_rmsd - a.rmsd_target) > a.rmsd_tolerance:
                # the calibration subset missed on the full set; recalibrate on all of it
                eps, achieved, steps = _calibrate(config, k, model, test.images, test.labels)
                calib.update(calibration_samples=len(test), calibration_rmsd=achieved,
                             calibration_evaluations=steps)
                spec = attacks.AttackSpec(k, eps, iterations=a.iterations)
                out = attacks.generate(model, test.images, test.labels, spec, batch_size=a.batch_size)
            os.makedirs(os.path.dirname(stem), exist_ok=True)
            attacks.save_attack(out, test.labels, stem, extra={"config_hash": h, "kind": k, **calib})
            log.info("attack %s/%s: eps=%.5g rmsd=%.3f time=%.2fs", name, k, eps, out.mean_rmsd, out.duration_s)


# -- evaluation -----------------------------------------------------------


def cmd_evaluate(config):
    data, _ = load_prepared(config)
    test = data["test"]
    target = load_model(config, "blackbox")
    clean_acc = accuracy(target, test)
    clean_correct = config.evaluation.asr_mode == "clean-correct"
    report = EvalReport(asr_mode=config.evaluation.asr_mode)
    for name, kind_of_attacker in ATTACKERS:
        student_meta = _read_json(_path(config, "models", f"{name}.json")) if name in STUDENTS else {}
        for k in config.attack.kinds:
            stem = _path(config, "attacks", f"{name}_{k}")
            meta = _require(stem + ".json", f"attack archive {name}/{k} (run 'attack {name} {k}')")
            _check_hash(meta, attack_hash(config, name, k), f"attack archive {name}/{k}", stem + ".json")
            images = np.load(stem + ".npy")
            if len(images) != len(test):
                raise MissingArtifact(f"{stem}.npy holds {len(images)} images, test set has {len(test)}")
            report.add(
                attacker=name, type=kind_of_attacker, attack=k, rmsd=meta["mean_rmsd"],
                asr=asr(target, images, test.labels, test.images if clean_correct else None),
                clean_acc=clean_acc, pgd_time_s=meta["duration_s"] if k == "pgd" else None,
                alpha=student_meta.get("alpha"), tau=student_meta.get("tau"),
                strategy=student_meta.get("strategy"), seed=student_meta.get("seed"))
    os.makedirs(_path(config, "reports"), exist_ok=True)
    write_report(report, _path(config, "reports", "matrix.csv"))
    write_report(report, _path(config, "reports", "matrix.json"))
    _write_json(_path(config, "reports", "matrix.meta.json"),
                {"config_hash": config.section_hash(), "clean_acc": clean_acc, "rows": len(report)})
    print(format_table(report, title=f"Black-box target (clean accuracy {clean_acc:.4f})"))
    return report


def cmd_ablate(config):
    data, meta = load_prepared(config)
    teachers = [load_model(config, t) for t in ("teacher-residual", "teacher-dense")]
    target = load_model(config, "blackbox")
    d, a = config.distill, config.attack
    width = config.train.width
    lr = max(config.train.lr_grid)

    def factory(seed):
        return zoo.build("student-plain", seed=seed, width=width, mean=meta["mean"], std=meta["std"])

    base = KDConfig(switch_period=d.switch_period, seeds=_seeds(config), schedule=_schedule(config, lr),
                    scale_tau2=d.scale_tau2)
    # students already on disk with a matching hash are reused
    trained = {}
    for strategy in d.strategies:
        for alpha in d.alpha_grid:
            for tau in d.tau_grid:
                kd = replace(base, strategy=strategy, alpha=alpha, tau=tau)
                name = f"ablation-{kd.label}"
                h = ablation_model_hash(config, kd)
                if _is_current(config, name, h):
                    student = load_model(config, name, h)
                    hist_meta = _read_json(_path(config, "models", f"{name}.json"))
                    history = TrainHistory.from_csv(_path(config, "models", f"{name}.history.csv"))
                    history.seed, history.best_epoch = hist_meta["seed"], hist_meta["best_epoch"]
                else:
                    try:
                        student, history = train_student(kd, teachers, (data["train"], data["val"]),
                                                         factory, log=log.info)
                    except DivergenceError as exc:
                        _flush_divergence(config, name, exc)
                        raise
                    _save_model(config, name, student, history,
                                {"config_hash": h, "strategy": strategy, "alpha": alpha, "tau": tau,
                                 "max_lr": lr})
                trained[kd.label] = (student, history)

    cal_n = min(a.calibration_samples, len(data["test"]))
    cal = data["test"].subset(np.arange(cal_n))

    def calibrate(model, kind):
        fixed = a.epsilons.get(kind)
        if fixed is not None:
            return float(fixed)
        return _calibrate(config, kind, model, cal.images, cal.labels)[0]

    rep = run_ablation(d.strategies, d.alpha_grid, d.tau_grid, teachers, (data["train"], data["val"]),
                       data["test"], target, factory, base, calibrate, iterations=a.iterations,
                       batch_size=a.batch_size, log=log.info, trained=trained)
    os.makedirs(_path(config, "reports"), exist_ok=True)
    write_report(rep.rows, _path(config, "reports", "ablation.csv"), columns=ABLATION_COLUMNS)
    write_report(rep.eval_report, _path(config, "reports", "ablation_long.csv"))
    _write_json(_path(config, "reports", "ablation.meta.json"), {"config_hash": config.section_hash()})
    print(format_ablation(rep.rows))
    return rep


def format_ablation(rows):
    head = f"{'Strategy':<11} {'alpha':>5} {'tau':>4} {'seed':>4} {'RMSD':>6} {'FG':>5} {'FGS':>5} {'PGD':>5} {'Acc':>6}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['strategy']:<11} {r['alpha']:>5g} {r['tau']:>4g} {r['seed']:>4} {r['rmsd']:>6.2f} "
                     f"{r['fg']:>5.2f} {r['fgs']:>5.2f} {r['pgd']:>5.2f} {r['acc']:>6.4f}")
    return "\n".join(lines)


def cmd_slice(config, image_index=None):
    data, _ = load_prepared(config)
    b = config.boundary
    index = b.image_index if image_index is None else image_index
    test = data["test"]
    if not 0 <= index < len(test):
        raise ConfigFileError(f"image index {index} outside the test set (size {len(test)})")
    models = {name: load_model(config, name) for name in MODEL_NAMES}
    x, y = test.images[index], int(test.labels[index])
    u, v = boundary.slice_directions(models["blackbox"], x, y, seed=b.direction_seed)
    written = []
    for level, r in zip(("wide", "zoom"), b.ranges):
        sl = boundary.boundary_grid(models, x, y, u, v, r, b.resolution)
        written += boundary.export_slice(sl, _path(config, "slices", level))
        centre = b.resolution // 2
        summary = ", ".join(f"{n}={int(sl.correct[n].mean() * 100)}%" for n in models)
        log.info("slice %s (+/-%g px, centre class %s): correct area %s", level, r,
                 {n: int(sl.classes[n][centre, centre]) for n in models}, summary)
    _write_json(_path(config, "slices", "meta.json"),
                {"config_hash": config.section_hash("boundary"), "image_index": index, "label": y,
                 "models": {n: model_hash(config, n) for n in models}})
    return written


# -- entry point ----------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="kdtransfer", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="base seed (overrides the config)")
    p.add_argument("--serial", action="store_true", help="single-threaded BLAS for bit-stable reruns")
    p.add_argument("--fast", action="store_true", help="small synthetic profile for smoke runs")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", help="build and cache the data splits")
    t = sub.add_parser("train", help="train teachers, the black box and students")
    t.add_argument("target", nargs="?", default="all", help=f"one of {', '.join(MODEL_NAMES)} or 'all'")
    a = sub.add_parser("attack", help="calibrate and generate adversarial test sets")
    a.add_argument("attacker", nargs="?", default="all")
    a.add_argument("kind", nargs="?", default="all", choices=("all",) + attacks.KINDS)
    sub.add_parser("evaluate", help="score attack archives against the black box")
    sub.add_parser("ablate", help="distillation grid over strategy, alpha and tau")
    s = sub.add_parser("slice", help="decision-boundary slices around a test image")
    s.add_argument("image_index", nargs="?", type=int)
    sub.add_parser("show-config", help="print the effective configuration")
    return p


def resolve_config(args):
    config = load_config(args.config)
    if args.fast:
        config = fast_profile(config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out:
        config.output_dir = args.out
    return config.validate()


@contextlib.contextmanager
def _serial(enabled):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def run(args):
    config = resolve_config(args)
    if args.command == "show-config":
        print(json.dumps(config.to_dict(), indent=2))
        return
    os.makedirs(config.output_dir, exist_ok=True)
    dump_config(config, os.path.join(config.output_dir, "config.yaml"))
    with _serial(args.serial):
        if args.command == "prepare":
            cmd_prepare(config)
        elif args.command == "train":
            cmd_train(config, args.target)
        elif args.command == "attack":
            cmd_attack(config, args.attacker, args.kind)
        elif args.command == "evaluate":
            cmd_evaluate(config)
        elif args.command == "ablate":
            cmd_ablate(config)
        elif args.command == "slice":
            cmd_slice(config, args.image_index)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        run(args)
    except (ConfigFileError, ConfigError, IngestionError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except attacks.CalibrationError as exc:
        log.error("calibration failed: %s", exc)
        return EXIT_CALIBRATION
    except (MissingArtifact, CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
