import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kdtransfer import zoo
from kdtransfer.attacks import AttackSpec, Ensemble, generate
from kdtransfer.data import Dataset, synthetic_blobs, train_val_split
from kdtransfer.distill import KDConfig, TrainSchedule
from kdtransfer.evaluation import (
    ABLATION_COLUMNS,
    COLUMNS,
    EvalReport,
    accuracy,
    asr,
    format_table,
    read_report,
    rmsd,
    run_ablation,
    run_matrix,
    write_report,
)
from kdtransfer.nn import Dense, GlobalAvgPool, GraphBuilder, Model

QUIET = dict(log=lambda s: None)


class Constant:
    """Predicts a fixed class for every input."""

    num_classes = 10

    def __init__(self, cls):
        self.cls = cls

    def predict(self, x, batch_size=500):
        return np.full(len(x), self.cls)


def test_rmsd_examples():
    x = np.random.default_rng(0).uniform(0, 250, (3, 3, 4, 4))
    assert rmsd(x, x) == 0.0
    assert rmsd(x, x + 2) == pytest.approx(2.0)
    y = x.copy()
    y[1, 0, 0, 0] += 8
    assert rmsd(x[1], y[1]) == pytest.approx(8 / np.sqrt(48))
    # batch value is the mean of per-image values
    assert rmsd(x, y) == pytest.approx(8 / np.sqrt(48) / 3)
    with pytest.raises(ValueError):
        rmsd(x, x[:2])


@settings(max_examples=50, deadline=None)
@given(a=arrays(np.float64, (2, 3, 2, 2), elements=st.floats(0, 255)),
       b=arrays(np.float64, (2, 3, 2, 2), elements=st.floats(0, 255)))
def test_rmsd_properties(a, b):
    r = rmsd(a, b)
    assert r >= 0
    assert r == pytest.approx(rmsd(b, a))
    assert r <= 255 + 1e-9


def test_asr_examples():
    labels = np.array([3, 3, 1, 3])
    x = np.zeros((4, 3, 32, 32), np.float32)
    assert asr(Constant(3), x, np.full(4, 3)) == 0.0
    assert asr(Constant(3), x, np.full(4, 5)) == 1.0
    assert asr(Constant(3), x, labels) == 0.25
    # clean-correct mode drops the sample the target already gets wrong
    assert asr(Constant(3), x, labels, clean_images=x) == 0.0


def test_accuracy_examples():
    g = GraphBuilder()
    g.add("gap", GlobalAvgPool(), "input")
    g.add("fc", Dense(3, 10), "gap")
    flat = Model("flat", (3, 32, 32), 10, g.nodes)
    flat.params["fc.weight"][...] = 0
    balanced = synthetic_blobs(n_per_class=5)
    assert accuracy(flat, balanced) == pytest.approx(0.1)
    assert accuracy(Constant(0), Dataset(np.zeros((0, 3, 32, 32), np.float32), np.zeros(0, int))) == 0.0


def test_accuracy_asr_complement():
    ds = synthetic_blobs(n_per_class=4, seed=1)
    m = zoo.build("student-plain", width=0.25, seed=3)
    assert accuracy(m, ds) + asr(m, ds.images, ds.labels) == pytest.approx(1.0)


def test_separable_synthetic_perfect_model():
    ds = synthetic_blobs(n_per_class=10, seed=0)
    means = ds.images.reshape(10, 10, -1).mean(axis=1)

    class NearestMean:
        def predict(self, x, batch_size=500):
            d = ((x.reshape(len(x), 1, -1) - means[None]) ** 2).sum(-1)
            return d.argmin(1)

    assert accuracy(NearestMean(), synthetic_blobs(n_per_class=10, seed=0, split="test")) == 1.0


def test_report_row_validation():
    rep = EvalReport()
    rep.add(attacker="a", type="self", attack="fg", rmsd=25.0, asr=0.5)
    with pytest.raises(ValueError):
        rep.add(attacker="a", type="self", attack="fg", rmsd=25.0, asr=0.5)
    with pytest.raises(ValueError):
        rep.add(attacker="b", type="self", attack="fg", rmsd=25.0, asr=1.5)
    with pytest.raises(ValueError):
        rep.add(attacker="b", type="self", attack="fg", rmsd=-1.0, asr=0.5)


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_report_round_trip(tmp_path, fmt):
    rep = EvalReport()
    rep.add(attacker="student", type="student", attack="pgd", rmsd=24.987654, asr=0.91234,
            clean_acc=0.8, pgd_time_s=1.23456, alpha=0.3, tau=1.0, strategy="joint", seed=1)
    rep.add(attacker="teacher", type="baseline", attack="fg", rmsd=25.1, asr=0.2, clean_acc=0.8)
    path = tmp_path / f"r.{fmt}"
    write_report(rep, str(path))
    back = read_report(str(path))
    assert len(back) == 2
    assert list(back[0]) == list(COLUMNS)
    for orig, row in zip(rep.rows, back):
        for key in COLUMNS:
            if isinstance(orig[key], float):
                assert row[key] == pytest.approx(orig[key], abs=5e-5)
            else:
                assert row[key] == orig[key]
    if fmt == "csv":
        lines = path.read_text().splitlines()
        assert len(lines) == len(rep) + 1
        assert "24.9877" in lines[1]


def test_empty_report_header_only(tmp_path):
    path = tmp_path / "e.csv"
    write_report(EvalReport(), str(path))
    assert path.read_text().splitlines() == [",".join(COLUMNS)]
    with pytest.raises(ValueError):
        write_report(EvalReport(), str(tmp_path / "e.xml"))


# -- matrix ---------------------------------------------------------------


@pytest.fixture(scope="module")
def zoo_models():
    rng_models = {role: zoo.build(role, seed=i, width=0.25, mean=[128] * 3, std=[64] * 3)
                  for i, role in enumerate(zoo.ROLES)}
    test = synthetic_blobs(n_per_class=3, seed=0, split="test")
    return rng_models, test


def six_attackers(models):
    ens = Ensemble([models["teacher-residual"], models["teacher-dense"]], name="ensemble")
    return [
        ("blackbox", "self", models["blackbox-multibranch"]),
        ("teacher-residual", "baseline", models["teacher-residual"]),
        ("teacher-dense", "baseline", models["teacher-dense"]),
        ("ensemble", "ensemble", ens),
        ("student-curriculum", "student", models["student-plain"]),
        ("student-joint", "student", zoo.build("student-plain", seed=9, width=0.25)),
    ]


def test_matrix_cardinality_and_determinism(zoo_models):
    models, test = zoo_models
    attackers = six_attackers(models)
    eps = {(name, kind): {"fg": 800.0, "fgs": 20.0, "pgd": 25.0}[kind]
           for name, _, _ in attackers for kind in ("fg", "fgs", "pgd")}
    a = run_matrix(attackers, models["blackbox-multibranch"], eps, test, iterations=2, batch_size=16)
    b = run_matrix(attackers, models["blackbox-multibranch"], eps, test, iterations=2, batch_size=16)
    assert len(a) == 18
    assert a.attackers() == [name for name, _, _ in attackers]
    for ra, rb in zip(a.rows, b.rows):
        assert {k: v for k, v in ra.items() if k != "pgd_time_s"} == \
               {k: v for k, v in rb.items() if k != "pgd_time_s"}
        assert (ra["pgd_time_s"] is not None) == (ra["attack"] == "pgd")
    table = format_table(a, title="matrix")
    assert "ensemble" in table and len(table.splitlines()) == 3 + 6


def test_matrix_persists_partial_report(zoo_models, tmp_path):
    models, test = zoo_models
    attackers = six_attackers(models)[:2]
    eps = {("blackbox", "fg"): 500.0, ("blackbox", "fgs"): 10.0, ("teacher-residual", "fg"): -1.0}
    partial = tmp_path / "partial.csv"
    with pytest.raises(ValueError):
        run_matrix(attackers, models["blackbox-multibranch"], eps, test, partial_path=str(partial))
    rows = read_report(str(partial))
    assert [(r["attacker"], r["attack"]) for r in rows] == [("blackbox", "fg"), ("blackbox", "fgs")]


def test_pgd_time_scales_with_iterations():
    m = zoo.build("student-plain", seed=0, width=0.5, mean=[128] * 3, std=[64] * 3)
    x = synthetic_blobs(n_per_class=30, seed=0).images
    y = np.zeros(len(x), int)

    def best_of(iterations, reps=3):
        return min(generate(m, x, y, AttackSpec("pgd", 8.0, iterations=iterations)).duration_s
                   for _ in range(reps))

    ratio = best_of(10) / best_of(5)
    assert abs(ratio - 2.0) <= 0.3 * 2.0


def test_run_ablation_grid(tmp_path):
    ds = synthetic_blobs(n_per_class=6, seed=0)
    train, val = train_val_split(ds, 0.2, seed=0)
    test = synthetic_blobs(n_per_class=2, seed=0, split="test")
    mean, std = train.channel_stats()
    teachers = [zoo.build(r, seed=0, width=0.25, mean=mean, std=std) for r in ("teacher-residual", "teacher-dense")]
    target = zoo.build("blackbox-multibranch", seed=0, width=0.25, mean=mean, std=std)
    base = KDConfig(seeds=(0, 1), schedule=TrainSchedule(max_epochs=1, warmup_epochs=0, batch_size=64))
    rep = run_ablation(
        ["curriculum", "joint"], [0.0, 0.3], [1.0, 5.0], teachers, (train, val), test, target,
        lambda seed: zoo.build("student-plain", seed=seed, width=0.25, mean=mean, std=std),
        base, calibrate=lambda model, kind: {"fg": 900.0, "fgs": 20.0, "pgd": 25.0}[kind],
        iterations=2, **QUIET,
    )
    assert len(rep.rows) == 8
    assert len(rep.eval_report) == 24
    assert {(r["strategy"], r["alpha"], r["tau"]) for r in rep.rows} == {
        (s, a, t) for s in ("curriculum", "joint") for a in (0.0, 0.3) for t in (1.0, 5.0)}
    assert all(0 <= r["acc"] <= 1 and r["seed"] in (0, 1) for r in rep.rows)
    path = tmp_path / "ablation.csv"
    write_report(rep.rows, str(path), columns=ABLATION_COLUMNS)
    assert len(path.read_text().splitlines()) == 9
