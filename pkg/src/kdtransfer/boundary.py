"""Two-dimensional decision-boundary slices through input space.

The slice is spanned by ``u``, the unit cross-entropy gradient of a reference
model at the anchor, and ``v``, a seeded random direction orthogonalised
against ``u``. Grid point ``(i, j)`` is ``x + a[i] * u + b[j] * v`` with ``a``
and ``b`` evenly spaced over ``[-r, r]``, clipped to valid pixels before each
model sees it.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .evaluation import predict

PALETTE = np.array([
    [31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189],
    [140, 86, 75], [227, 119, 194], [127, 127, 127], [188, 189, 34], [23, 190, 207],
], dtype=np.uint8)


class DegenerateAnchor(ValueError):
    pass


@dataclass
class BoundarySlice:
    anchor: np.ndarray
    label: int
    u: np.ndarray
    v: np.ndarray
    range_pixels: float
    resolution: int
    classes: dict = field(default_factory=dict)
    correct: dict = field(default_factory=dict)

    @property
    def coords(self):
        return np.linspace(-self.range_pixels, self.range_pixels, self.resolution)


def slice_directions(model, x, y, seed=0, max_tries=100):
    """Unit gradient direction ``u`` and a random unit ``v`` orthogonal to it."""
    x = np.asarray(x, np.float32)
    g = model.input_gradient(x[None], np.array([y]))[0].astype(np.float64).ravel()
    norm = np.linalg.norm(g)
    if norm == 0 or not np.isfinite(norm):
        raise DegenerateAnchor("zero loss gradient at the anchor; pick another image")
    u = g / norm
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        r = rng.standard_normal(u.size)
        if abs(r @ u) / np.linalg.norm(r) > 1 - 1e-9:
            continue
        v = r - (r @ u) * u
        v /= np.linalg.norm(v)
        return u.reshape(x.shape), v.reshape(x.shape)
    raise DegenerateAnchor("could not draw a direction independent of the gradient")


def boundary_grid(models, x, y, u, v, range_pixels, resolution=101, batch_size=500):
    """Evaluate each named model's argmax on the ``resolution`` x ``resolution`` grid.

    ``models`` maps names to models. ``classes[name][i, j]`` is the prediction
    at offset ``a[i]`` along ``u`` and ``b[j]`` along ``v``.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    counts = {m.num_classes for m in models.values()}
    if len(counts) != 1:
        raise ValueError(f"models disagree on class count: {sorted(counts)}")
    x = np.asarray(x, np.float32)
    out = BoundarySlice(x, int(y), np.asarray(u), np.asarray(v), float(range_pixels), int(resolution))
    coords = out.coords
    aa, bb = np.meshgrid(coords, coords, indexing="ij")
    aa, bb = aa.ravel(), bb.ravel()
    base, u64, v64 = x.astype(np.float64), np.asarray(u, np.float64), np.asarray(v, np.float64)
    preds = {name: [] for name in models}
    for start in range(0, len(aa), batch_size):
        a = aa[start:start + batch_size, None, None, None]
        b = bb[start:start + batch_size, None, None, None]
        points = np.clip(base + a * u64 + b * v64, 0, 255).astype(np.float32)
        for name, model in models.items():
            preds[name].append(predict(model, points, batch_size))
    for name in models:
        cls = np.concatenate(preds[name]).reshape(resolution, resolution)
        out.classes[name] = cls
        out.correct[name] = cls == out.label
    return out


def write_ppm(path, rgb):
    """Plain (P3) portable pixmap."""
    h, w, _ = rgb.shape
    with open(path, "w") as fh:
        fh.write(f"P3\n{w} {h}\n255\n")
        for row in rgb:
            fh.write(" ".join(str(int(v)) for v in row.ravel()) + "\n")


def read_ppm(path):
    with open(path) as fh:
        tokens = [t for line in fh for t in line.split("#")[0].split()]
    if tokens[0] != "P3":
        raise ValueError(f"{path}: not a plain PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array(tokens[4:4 + w * h * 3], dtype=np.int64)
    return data.reshape(h, w, 3), maxval


def slice_image(classes, correct):
    """RGB image: row 0 is ``b = +r``, column 0 is ``a = -r``; correct cells bright."""
    rgb = PALETTE[classes % len(PALETTE)].astype(np.float64)
    rgb = np.where(correct[..., None], 0.5 * rgb + 127.5, 0.45 * rgb)
    # (i: along u, j: along v) -> image rows from +b down, columns along a
    return np.rint(rgb.transpose(1, 0, 2)[::-1]).astype(np.uint8)


def export_slice(sl, directory, stem="slice"):
    """Write ``stem.csv`` (a,b,model,class,correct) and one ``stem_<model>.ppm`` per model."""
    os.makedirs(directory, exist_ok=True)
    coords = sl.coords
    csv_path = os.path.join(directory, f"{stem}.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["a", "b", "model", "class", "correct"])
        for name, cls in sl.classes.items():
            for i, a in enumerate(coords):
                for j, b in enumerate(coords):
                    writer.writerow([repr(float(a)), repr(float(b)), name, int(cls[i, j]),
                                     int(sl.correct[name][i, j])])
    paths = [csv_path]
    for name, cls in sl.classes.items():
        path = os.path.join(directory, f"{stem}_{name}.ppm")
        write_ppm(path, slice_image(cls, sl.correct[name]))
        paths.append(path)
    return paths


def read_slice_csv(path):
    """Rebuild ``(coords, {model: classes}, {model: correct})`` from an exported CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    coords = sorted({float(r["a"]) for r in rows})
    index = {c: i for i, c in enumerate(coords)}
    g = len(coords)
    classes, correct = {}, {}
    for r in rows:
        name = r["model"]
        if name not in classes:
            classes[name] = np.zeros((g, g), dtype=np.int64)
            correct[name] = np.zeros((g, g), dtype=bool)
        i, j = index[float(r["a"])], index[float(r["b"])]
        classes[name][i, j] = int(r["class"])
        correct[name][i, j] = r["correct"] == "1"
    return np.array(coords), classes, correct
