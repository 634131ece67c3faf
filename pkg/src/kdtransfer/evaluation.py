"""Metrics, the attacker x attack matrix, the KD ablation grid and reports."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

COLUMNS = ("attacker", "type", "attack", "rmsd", "asr", "clean_acc", "pgd_time_s",
           "alpha", "tau", "strategy", "seed")
FLOAT_COLUMNS = ("rmsd", "asr", "clean_acc", "pgd_time_s", "alpha", "tau")
INT_COLUMNS = ("seed",)
ABLATION_COLUMNS = ("strategy", "alpha", "tau", "seed", "rmsd", "fg", "fgs", "pgd", "acc", "pgd_time_s")


def rmsd_per_image(x, x_adv):
    diff = np.asarray(x_adv, np.float64) - np.asarray(x, np.float64)
    return np.sqrt((diff.reshape(len(diff), -1) ** 2).mean(axis=1))


def rmsd(x, x_adv):
    """RMS pixel deviation; for a batch, the mean of per-image values."""
    x, x_adv = np.asarray(x), np.asarray(x_adv)
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_adv.shape}")
    if x.ndim <= 1 or x.ndim == 3:
        return float(np.sqrt(np.mean((x_adv.astype(np.float64) - x) ** 2)))
    return float(rmsd_per_image(x, x_adv).mean())


def predict(model, images, batch_size=500):
    if hasattr(model, "predict"):
        return model.predict(images, batch_size)
    return np.concatenate([model.forward(images[i:i + batch_size]).argmax(axis=1)
                           for i in range(0, len(images), batch_size)])


def asr(target, x_adv, labels, clean_images=None, batch_size=500):
    """Fraction of adversarial inputs the target misclassifies.

    With ``clean_images`` only samples the target classifies correctly when
    clean enter the denominator.
    """
    labels = np.asarray(labels)
    wrong = predict(target, x_adv, batch_size) != labels
    if clean_images is not None:
        keep = predict(target, clean_images, batch_size) == labels
        return float(wrong[keep].mean()) if keep.any() else 0.0
    return float(wrong.mean()) if len(labels) else 0.0


def accuracy(model, dataset, batch_size=500):
    if len(dataset) == 0:
        return 0.0
    return float((predict(model, dataset.images, batch_size) == dataset.labels).mean())


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    asr_mode: str = "all"

    def add(self, **row):
        full = {key: row.get(key) for key in COLUMNS}
        if full["asr"] is not None and not 0.0 <= full["asr"] <= 1.0:
            raise ValueError(f"ASR {full['asr']} outside [0, 1]")
        if full["rmsd"] is not None and full["rmsd"] < 0:
            raise ValueError("negative RMSD")
        key = (full["attacker"], full["attack"])
        if any((r["attacker"], r["attack"]) == key for r in self.rows):
            raise ValueError(f"duplicate row for {key}")
        self.rows.append(full)
        return full

    def __len__(self):
        return len(self.rows)

    def get(self, attacker, attack):
        for row in self.rows:
            if row["attacker"] == attacker and row["attack"] == attack:
                return row
        raise KeyError((attacker, attack))

    def attackers(self):
        seen = []
        for row in self.rows:
            if row["attacker"] not in seen:
                seen.append(row["attacker"])
        return seen


def _fmt(value, digits=4):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def _parse(key, text):
    if text in ("", None):
        return None
    if key in FLOAT_COLUMNS:
        return float(text)
    if key in INT_COLUMNS:
        return int(text)
    return text


def write_report(report, path, format=None, columns=None):
    """Write rows as CSV or JSON with floats at 4 decimals."""
    rows = report.rows if hasattr(report, "rows") else report
    columns = columns or COLUMNS
    format = format or os.path.splitext(path)[1].lstrip(".")
    if format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_fmt(row.get(c)) for c in columns])
    elif format == "json":
        records = [{c: (round(row[c], 4) if isinstance(row.get(c), float) else row.get(c))
                    for c in columns} for row in rows]
        with open(path, "w") as fh:
            json.dump(records, fh, indent=2)
    else:
        raise ValueError(f"unknown report format {format!r}")
    return path


def read_report(path, format=None):
    format = format or os.path.splitext(path)[1].lstrip(".")
    if format == "csv":
        with open(path, newline="") as fh:
            return [{k: _parse(k, v) for k, v in row.items()} for row in csv.DictReader(fh)]
    with open(path) as fh:
        return json.load(fh)


def format_table(report, title=None):
    """Console table in the layout of the paper's tables, 2 decimals."""
    lines = []
    if title:
        lines.append(title)
    header = f"{'Type':<10} {'Attacker':<24} {'RMSD':>6} {'FG':>5} {'FGS':>5} {'PGD':>5} {'PGD Time (s)':>13}"
    lines += [header, "-" * len(header)]
    for name in report.attackers():
        rows = {r["attack"]: r for r in report.rows if r["attacker"] == name}
        first = next(iter(rows.values()))
        rm = np.mean([r["rmsd"] for r in rows.values()])
        cell = {k: (f"{rows[k]['asr']:.2f}" if k in rows else "-") for k in ("fg", "fgs", "pgd")}
        t = rows.get("pgd", {}).get("pgd_time_s")
        lines.append(f"{first['type']:<10} {name:<24} {rm:6.2f} {cell['fg']:>5} {cell['fgs']:>5} "
                     f"{cell['pgd']:>5} {('%.2f' % t) if t is not None else '-':>13}")
    return "\n".join(lines)


def run_matrix(attackers, target, epsilons, test, iterations=10, batch_size=150,
               only_clean_correct=False, partial_path=None, kd_params=None):
    """Attack ``target`` from every attacker with every attack kind.

    ``attackers`` is a list of ``(name, type, model)``; ``epsilons`` maps
    ``(name, kind)`` to a calibrated budget. If a row fails the rows so far
    are written to ``partial_path`` before the error propagates.
    """
    from .attacks import AttackSpec, generate

    report = EvalReport(asr_mode="clean-correct" if only_clean_correct else "all")
    clean_acc = accuracy(target, test)
    clean = test.images if only_clean_correct else None
    kd_params = kd_params or {}
    try:
        for name, kind_of_attacker, model in attackers:
            for kind in sorted({k for (n, k) in epsilons if n == name}, key=("fg", "fgs", "pgd").index):
                spec = AttackSpec(kind, float(epsilons[(name, kind)]), iterations=iterations)
                out = generate(model, test.images, test.labels, spec, batch_size=batch_size)
                kd = kd_params.get(name, {})
                row = report.add(
                    attacker=name, type=kind_of_attacker, attack=kind, rmsd=out.mean_rmsd,
                    asr=asr(target, out.images, test.labels, clean), clean_acc=clean_acc,
                    pgd_time_s=out.duration_s if kind == "pgd" else None,
                    alpha=kd.get("alpha"), tau=kd.get("tau"), strategy=kd.get("strategy"),
                    seed=kd.get("seed"),
                )
                logger.info("%s/%s eps=%.4g rmsd=%.3f asr=%.4f", name, kind, spec.epsilon,
                            row["rmsd"], row["asr"])
    except Exception:
        if partial_path:
            write_report(report, partial_path)
        raise
    return report


@dataclass
class AblationReport:
    rows: list
    eval_report: EvalReport


def ablation_rows(report, student_acc):
    """Pivot a long-form report to one row per KD configuration."""
    rows = []
    for name in report.attackers():
        per = {r["attack"]: r for r in report.rows if r["attacker"] == name}
        first = next(iter(per.values()))
        rows.append({
            "strategy": first["strategy"], "alpha": first["alpha"], "tau": first["tau"],
            "seed": first["seed"],
            "rmsd": float(np.mean([r["rmsd"] for r in per.values()])),
            "fg": per.get("fg", {}).get("asr"), "fgs": per.get("fgs", {}).get("asr"),
            "pgd": per.get("pgd", {}).get("asr"),
            "acc": student_acc[name], "pgd_time_s": per.get("pgd", {}).get("pgd_time_s"),
        })
    return rows


def run_ablation(strategies, alphas, taus, teachers, data, test, target, student_factory,
                 base_config, calibrate, iterations=10, batch_size=150, log=None,
                 trained=None):
    """Train one student per (strategy, alpha, tau), attack the target with each.

    ``calibrate(model, kind) -> epsilon`` supplies budgets; ``trained`` may
    hold already-trained ``{label: (student, history)}`` pairs to reuse.
    """
    from dataclasses import replace

    from .distill import train_student

    trained = dict(trained or {})
    attackers, epsilons, kd_params, student_acc = [], {}, {}, {}
    for strategy in strategies:
        for alpha in alphas:
            for tau in taus:
                config = replace(base_config, strategy=strategy, alpha=alpha, tau=tau)
                if config.label not in trained:
                    trained[config.label] = train_student(config, teachers, data, student_factory, log=log)
                student, history = trained[config.label]
                name = config.label
                attackers.append((name, "student", student))
                kd_params[name] = {"alpha": alpha, "tau": tau, "strategy": strategy, "seed": history.seed}
                student_acc[name] = accuracy(student, test)
                for kind in ("fg", "fgs", "pgd"):
                    epsilons[(name, kind)] = calibrate(student, kind)
    report = run_matrix(attackers, target, epsilons, test, iterations=iterations,
                        batch_size=batch_size, kd_params=kd_params)
    return AblationReport(ablation_rows(report, student_acc), report)
