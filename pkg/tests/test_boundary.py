import numpy as np
import pytest

from kdtransfer import zoo
from kdtransfer.boundary import (
    DegenerateAnchor,
    boundary_grid,
    export_slice,
    read_ppm,
    read_slice_csv,
    slice_directions,
)
from kdtransfer.data import synthetic_blobs
from kdtransfer.nn import Dense, Flatten, GraphBuilder, Model


@pytest.fixture(scope="module")
def setup():
    models = {role: zoo.build(role, seed=i, width=0.25, mean=[128] * 3, std=[64] * 3)
              for i, role in enumerate(zoo.ROLES)}
    ds = synthetic_blobs(n_per_class=1, seed=0, noise_std=10)
    return models, ds.images[3], int(ds.labels[3])


def linear_two_class(seed=0):
    g = GraphBuilder()
    g.add("flat", Flatten(), "input")
    g.add("fc", Dense(3 * 32 * 32, 2), "flat")
    m = Model("linear", (3, 32, 32), 2, g.nodes, mean=[128] * 3, std=[64] * 3, seed=seed)
    m.params["fc.weight"] *= 0.05
    return m


def test_directions_orthonormal_and_seeded(setup):
    models, x, y = setup
    bb = models["blackbox-multibranch"]
    u, v = slice_directions(bb, x, y, seed=4)
    assert u.shape == v.shape == x.shape
    assert abs(np.linalg.norm(u) - 1) <= 1e-6 and abs(np.linalg.norm(v) - 1) <= 1e-6
    assert abs(float((u * v).sum())) <= 1e-6
    u2, v2 = slice_directions(bb, x, y, seed=4)
    np.testing.assert_array_equal(v, v2)
    _, v3 = slice_directions(bb, x, y, seed=5)
    assert not np.array_equal(v, v3)


def test_u_invariant_to_loss_scale(setup):
    models, x, y = setup
    bb = models["blackbox-multibranch"]

    class Scaled:
        def input_gradient(self, x, y):
            return 7.0 * bb.input_gradient(x, y)

    u, _ = slice_directions(bb, x, y)
    us, _ = slice_directions(Scaled(), x, y)
    np.testing.assert_allclose(u, us, atol=1e-7)


def test_zero_gradient_anchor_rejected(setup):
    _, x, y = setup
    m = linear_two_class()
    m.params["fc.weight"][...] = 0
    with pytest.raises(DegenerateAnchor):
        slice_directions(m, x, 0)


def test_grid_anchor_and_cardinality(setup):
    models, x, y = setup
    u, v = slice_directions(models["blackbox-multibranch"], x, y)
    sl = boundary_grid(models, x, y, u, v, range_pixels=50, resolution=11)
    for name, model in models.items():
        assert sl.classes[name].shape == (11, 11)
        assert sl.classes[name][5, 5] == model.predict(x[None])[0]
        np.testing.assert_array_equal(sl.correct[name], sl.classes[name] == y)


def test_grid_point_mapping(setup):
    models, x, y = setup
    m = models["teacher-dense"]
    u, v = slice_directions(m, x, y, seed=1)
    sl = boundary_grid({"t": m}, x, y, u, v, range_pixels=30, resolution=7)
    a, b = sl.coords[1], sl.coords[5]
    point = np.clip(x.astype(np.float64) + a * u + b * v, 0, 255).astype(np.float32)
    assert sl.classes["t"][1, 5] == m.predict(point[None])[0]


def test_zoom_coherence(setup):
    models, x, y = setup
    u, v = slice_directions(models["blackbox-multibranch"], x, y)
    wide = boundary_grid(models, x, y, u, v, 50, 101)
    near = boundary_grid(models, x, y, u, v, 6, 101)
    shared = [(i, j) for i, c in enumerate(near.coords) for j, d in enumerate(wide.coords)
              if abs(c - d) < 1e-9]
    assert len(shared) == 5    # -6, -3, 0, 3, 6
    for name in models:
        for i, j in shared:
            for k, m in shared:
                assert near.classes[name][i, k] == wide.classes[name][j, m]


def test_linear_model_half_plane():
    m = linear_two_class(seed=2)
    x = np.full((3, 32, 32), 128, np.float32)
    u, v = slice_directions(m, x, 0, seed=0)
    r, g = 6.0, 101
    sl = boundary_grid({"lin": m}, x, 0, u, v, r, g)
    w = (m.params["fc.weight"][1] - m.params["fc.weight"][0]).astype(np.float64) / 64.0
    d0 = float(m.forward(x[None])[0, 1] - m.forward(x[None])[0, 0])
    p, q = float(w @ u.ravel()), float(w @ v.ravel())
    a, b = np.meshgrid(sl.coords, sl.coords, indexing="ij")
    margin = d0 + a * p + b * q          # > 0 where class 1 wins
    cell = 2 * r / (g - 1)
    # distance of each cell centre to the analytic boundary line
    dist = np.abs(margin) / np.hypot(p, q)
    mismatch = (sl.classes["lin"] == 1) != (margin > 0)
    assert not mismatch[dist > cell].any()
    # both sides present, so the line actually crosses the slice
    assert sl.correct["lin"].any() and (~sl.correct["lin"]).any()


def test_export_round_trip(setup, tmp_path):
    models, x, y = setup
    u, v = slice_directions(models["blackbox-multibranch"], x, y)
    sl = boundary_grid(models, x, y, u, v, 50, 9)
    paths = export_slice(sl, str(tmp_path), stem="wide")
    assert len(paths) == 1 + len(models)
    lines = (tmp_path / "wide.csv").read_text().splitlines()
    assert lines[0] == "a,b,model,class,correct"
    assert len(lines) == len(models) * 81 + 1
    coords, classes, correct = read_slice_csv(str(tmp_path / "wide.csv"))
    np.testing.assert_allclose(coords, sl.coords)
    for name in models:
        np.testing.assert_array_equal(classes[name], sl.classes[name])
        np.testing.assert_array_equal(correct[name], sl.correct[name])
        rgb, maxval = read_ppm(str(tmp_path / f"wide_{name}.ppm"))
        assert rgb.shape == (9, 9, 3) and maxval == 255


def test_single_model_csv_rows(setup, tmp_path):
    models, x, y = setup
    m = {"bb": models["blackbox-multibranch"]}
    u, v = slice_directions(m["bb"], x, y)
    export_slice(boundary_grid(m, x, y, u, v, 6, 5), str(tmp_path))
    assert len((tmp_path / "slice.csv").read_text().splitlines()) == 5 * 5 + 1


def test_grid_validation(setup):
    models, x, y = setup
    u, v = slice_directions(models["blackbox-multibranch"], x, y)
    with pytest.raises(ValueError):
        boundary_grid(models, x, y, u, v, 6, 1)
    with pytest.raises(ValueError):
        boundary_grid({"a": models["student-plain"], "b": linear_two_class()}, x, y, u, v, 6, 3)
