import numpy as np
import pytest

from kdtransfer import zoo
from kdtransfer.data import synthetic_blobs, train_val_split
from kdtransfer.distill import DivergenceError, TrainSchedule
from kdtransfer.evaluation import accuracy


def test_size_ordering_reference_width():
    n = {role: zoo.build(role).num_params for role in zoo.ROLES}
    assert n["student-plain"] < n["teacher-residual"]
    assert n["student-plain"] < n["teacher-dense"]
    assert n["blackbox-multibranch"] <= 1.2 * n["student-plain"]
    assert 300_000 <= n["teacher-residual"] <= 600_000
    assert 300_000 <= n["teacher-dense"] <= 600_000
    assert 100_000 <= n["student-plain"] <= 200_000
    assert 80_000 <= n["blackbox-multibranch"] <= 150_000


@pytest.mark.parametrize("width", [1.0, 0.25])
def test_role_contracts(width):
    res = zoo.build("teacher-residual", width=width)
    dense = zoo.build("teacher-dense", width=width)
    bb = zoo.build("blackbox-multibranch", width=width)
    assert zoo.count_kind(res, "add-skip") >= 2
    assert zoo.count_kind(dense, "concat-branch") >= 2
    assert zoo.has_multiscale_branch(bb)
    assert not zoo.has_multiscale_branch(res)


def test_attacker_architectures_heterogeneous():
    def multiset(role):
        return sorted(zoo.build(role, width=0.25).layer_kinds())

    kinds = [multiset(r) for r in ("teacher-residual", "teacher-dense", "student-plain")]
    assert kinds[0] != kinds[1] and kinds[0] != kinds[2] and kinds[1] != kinds[2]


def test_build_deterministic_per_seed():
    a, b = zoo.build("teacher-dense", seed=5), zoo.build("teacher-dense", seed=5)
    for key in a.params:
        assert a.params[key].tobytes() == b.params[key].tobytes()
    c = zoo.build("teacher-dense", seed=6)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


@pytest.mark.parametrize("role", zoo.ROLES)
def test_forward_shape(role):
    m = zoo.build(role, width=0.25)
    assert m.forward(np.full((2, 3, 32, 32), 100, np.float32)).shape == (2, 10)


def test_unknown_role():
    with pytest.raises(ValueError):
        zoo.build("resnet-50")


@pytest.fixture(scope="module")
def two_class():
    ds = synthetic_blobs(num_classes=2, n_per_class=60, seed=1)
    ds = type(ds)(ds.images, ds.labels, "train", 10)
    return train_val_split(ds, 0.2, seed=0)


def test_supervised_training_separable(two_class):
    train, val = two_class
    mean, std = train.channel_stats()
    m = zoo.build("student-plain", seed=0, width=0.25, mean=mean, std=std)
    schedule = TrainSchedule(max_epochs=6, warmup_epochs=1, max_lr=1e-2, batch_size=32, patience=10)
    m, hist = zoo.train_supervised(m, two_class, schedule, seed=0, log=lambda s: None)
    assert accuracy(m, train) >= 0.99
    assert len(hist) == len(hist.epoch) <= 6
    assert hist.epoch == list(range(len(hist)))


def test_zero_epochs_leaves_model_unchanged(two_class):
    m = zoo.build("student-plain", seed=0, width=0.25)
    before = m.checksum()
    m, hist = zoo.train_supervised(m, two_class, TrainSchedule(max_epochs=0, warmup_epochs=0),
                                   log=lambda s: None)
    assert m.checksum() == before and len(hist) == 0


def test_divergence_reports_epoch_and_batch(two_class):
    m = zoo.build("student-plain", seed=0, width=0.25)
    m.params["fc.bias"][0] = np.nan
    with pytest.raises(DivergenceError, match="epoch 0, batch 0"):
        zoo.train_supervised(m, two_class, TrainSchedule(max_epochs=2, warmup_epochs=1),
                             log=lambda s: None)
