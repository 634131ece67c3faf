# # Two teachers, one black box, two students
#
# Everything here runs on the synthetic stand-in for CIFAR-10: ten classes
# of smooth colour patterns with pixel noise and small random shifts.
# Checkpoints go to demos/_out for the next two scripts.

import os

from kdtransfer import zoo
from kdtransfer.data import synthetic_blobs, train_val_split
from kdtransfer.distill import KDConfig, TrainSchedule, train_student
from kdtransfer.evaluation import accuracy
from kdtransfer.nn import save_checkpoint

OUT = os.path.join(os.path.dirname(__file__), "_out")
os.makedirs(OUT, exist_ok=True)

blobs = dict(separation=150.0, noise_std=30.0, shift=3, seed=0)
train, val = train_val_split(synthetic_blobs(n_per_class=100, **blobs), 0.1)
test = synthetic_blobs(n_per_class=30, split="test", **blobs)
mean, std = train.channel_stats()
schedule = TrainSchedule(max_epochs=10, warmup_epochs=2, max_lr=3e-3, batch_size=64)
quiet = lambda line: None

models = {}
for role in ("teacher-residual", "teacher-dense", "blackbox-multibranch"):
    net = zoo.build(role, seed=0, width=0.25, mean=mean, std=std)
    models[role], history = zoo.train_supervised(net, (train, val), schedule, log=quiet)
    print(f"{role:22s} params={net.num_params:7d} best epoch {history.best_epoch} "
          f"test acc {accuracy(models[role], test):.3f}")

# ## Distillation
#
# Curriculum switches the active teacher every four epochs; joint averages
# the two soft losses at every step. The history records which teacher was
# active.

teachers = [models["teacher-residual"], models["teacher-dense"]]
for strategy in ("curriculum", "joint"):
    config = KDConfig(strategy, alpha=0.3, tau=1.0, seeds=(0,), schedule=schedule)
    student, history = train_student(
        config, teachers, (train, val),
        lambda seed: zoo.build("student-plain", seed=seed, width=0.25, mean=mean, std=std), log=quiet)
    models["student-" + strategy] = student
    print(f"student-{strategy:10s} teacher per epoch {history.teacher_index} "
          f"test acc {accuracy(student, test):.3f}")

for name, net in models.items():
    save_checkpoint(net, os.path.join(OUT, name + ".ckpt"))
