# # Attacking the black box through its substitutes
#
# Each attacker gets its own budget, chosen by bisection so the mean RMSD
# of the adversarial images is 25 +- 1 pixel levels. Only the black box's
# labels are used to score the result. Run 02_distill_students.py first.

import os

from kdtransfer.attacks import Ensemble, calibrate_epsilon
from kdtransfer.data import synthetic_blobs
from kdtransfer.evaluation import format_table, run_matrix
from kdtransfer.nn import load_checkpoint

OUT = os.path.join(os.path.dirname(__file__), "_out")
load = lambda name: load_checkpoint(os.path.join(OUT, name + ".ckpt"))
test = synthetic_blobs(n_per_class=30, split="test", separation=150.0, noise_std=30.0, shift=3, seed=0)

blackbox = load("blackbox-multibranch")
teachers = [load("teacher-residual"), load("teacher-dense")]
attackers = [
    ("blackbox", "self", blackbox),
    ("teacher-residual", "baseline", teachers[0]),
    ("teacher-dense", "baseline", teachers[1]),
    ("ensemble", "ensemble", Ensemble(teachers)),
    ("student-curriculum", "student", load("student-curriculum")),
    ("student-joint", "student", load("student-joint")),
]

epsilons = {}
for name, _, model in attackers:
    for kind in ("fg", "fgs", "pgd"):
        eps, achieved, trace = calibrate_epsilon(kind, model, test.images, test.labels)
        epsilons[(name, kind)] = eps
        print(f"{name:20s} {kind:4s} eps={eps:9.3f} rmsd={achieved:.2f} after {len(trace)} tries")

report = run_matrix(attackers, blackbox, epsilons, test)
print(format_table(report, title="Attack success against the black box"))

# The PGD time column is the cost of crafting the whole set: the ensemble
# needs two teacher backward passes per step, a student needs one small one.
