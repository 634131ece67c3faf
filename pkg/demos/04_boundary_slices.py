# # Decision regions around one test image
#
# The slice spans the black box's loss-gradient direction u and a random
# direction v orthogonal to it. Each model gets a G x G picture where bright
# cells keep the true label. Run 02_distill_students.py first.

import os

import numpy as np

from kdtransfer.boundary import boundary_grid, export_slice, slice_directions
from kdtransfer.data import synthetic_blobs
from kdtransfer.nn import load_checkpoint

OUT = os.path.join(os.path.dirname(__file__), "_out")
names = ["teacher-residual", "teacher-dense", "blackbox-multibranch", "student-curriculum", "student-joint"]
models = {n: load_checkpoint(os.path.join(OUT, n + ".ckpt")) for n in names}
test = synthetic_blobs(n_per_class=30, split="test", separation=150.0, noise_std=30.0, shift=3, seed=0)
x, y = test.images[0], int(test.labels[0])

u, v = slice_directions(models["blackbox-multibranch"], x, y, seed=0)
print("u.v =", float(np.vdot(u, v)))

for level, r in (("wide", 50.0), ("zoom", 6.0)):
    sl = boundary_grid(models, x, y, u, v, r, resolution=101)
    files = export_slice(sl, os.path.join(OUT, "slices", level))
    print(f"+/-{r:g} px:", ", ".join(f"{n} {sl.correct[n].mean():.0%} correct" for n in names))
    print("  wrote", len(files), "files to", os.path.dirname(files[0]))
