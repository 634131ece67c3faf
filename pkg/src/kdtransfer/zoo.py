"""The four desk-scale architectures and supervised training.

Roles and their structural signature:

* ``teacher-residual``: conv stages with identity shortcuts (``add-skip``).
* ``teacher-dense``: dense blocks whose layers see every earlier feature map
  (``concat-branch``).
* ``student-plain``: a plain conv/pool stack, smaller than either teacher.
* ``blackbox-multibranch``: inception-style modules with parallel 1x1, 3x3 and
  5x5 convolutions, concatenated.

``width`` scales every channel count; 1.0 gives the reference sizes and the
small values used by the fast profile keep all role invariants.
"""

from __future__ import annotations

from .nn import (
    AddSkip,
    ConcatBranch,
    Conv2d,
    Dense,
    GlobalAvgPool,
    GraphBuilder,
    MaxPool2d,
    Model,
    ReLU,
)

ROLES = ("teacher-residual", "teacher-dense", "student-plain", "blackbox-multibranch")


def _ch(base, width):
    return max(4, int(round(base * width)))


def _conv_relu(g, name, src, cin, cout, k=3):
    h = g.add(name, Conv2d(cin, cout, k, 1, k // 2), src)
    return g.add(name + "_relu", ReLU(), h)


def _teacher_residual(width):
    g = GraphBuilder()
    c1, c2, c3 = _ch(32, width), _ch(64, width), _ch(128, width)
    h = _conv_relu(g, "stem", "input", 3, c1)
    h = g.add("pool1", MaxPool2d(2), h)
    for stage, (cin, c) in enumerate([(c1, c1), (c1, c2), (c2, c3)], start=1):
        if stage > 1:
            h = _conv_relu(g, f"proj{stage}", h, cin, c)
            if stage == 2:
                h = g.add(f"pool{stage}", MaxPool2d(2), h)
        r = _conv_relu(g, f"res{stage}a", h, c, c)
        r = g.add(f"res{stage}b", Conv2d(c, c, 3, 1, 1), r)
        h = g.add(f"skip{stage}", AddSkip(), h, r)
        h = g.add(f"skip{stage}_relu", ReLU(), h)
        if stage == 3:
            h = g.add(f"pool{stage}", MaxPool2d(2), h)
    h = g.add("gap", GlobalAvgPool(), h)
    g.add("fc", Dense(c3, 10), h)
    return g.nodes


def _teacher_dense(width):
    g = GraphBuilder()
    stem, g1, g2, g3 = _ch(24, width), _ch(32, width), _ch(48, width), _ch(72, width)
    t1, t2 = _ch(64, width), _ch(128, width)
    h = _conv_relu(g, "stem", "input", 3, stem)
    h = g.add("pool1", MaxPool2d(2), h)
    channels = stem
    for block, (growth, trans) in enumerate([(g1, t1), (g2, t2), (g3, None)], start=1):
        for layer in (1, 2):
            new = _conv_relu(g, f"d{block}{layer}", h, channels, growth)
            h = g.add(f"cat{block}{layer}", ConcatBranch(), h, new)
            channels += growth
        if trans is not None:
            h = _conv_relu(g, f"trans{block}", h, channels, trans, k=1)
            h = g.add(f"pool{block + 1}", MaxPool2d(2), h)
            channels = trans
    h = g.add("gap", GlobalAvgPool(), h)
    g.add("fc", Dense(channels, 10), h)
    return g.nodes


def _student_plain(width):
    g = GraphBuilder()
    c1, c2, c3 = _ch(32, width), _ch(64, width), _ch(96, width)
    h = _conv_relu(g, "conv1", "input", 3, c1)
    h = g.add("pool1", MaxPool2d(2), h)
    h = _conv_relu(g, "conv2", h, c1, c2)
    h = g.add("pool2", MaxPool2d(2), h)
    h = _conv_relu(g, "conv3", h, c2, c3)
    h = _conv_relu(g, "conv4", h, c3, c3)
    h = g.add("pool3", MaxPool2d(2), h)
    h = g.add("gap", GlobalAvgPool(), h)
    g.add("fc", Dense(c3, 10), h)
    return g.nodes


def _inception(g, name, src, cin, b1, b3, b5):
    p1 = _conv_relu(g, f"{name}_1x1", src, cin, b1, k=1)
    p3 = _conv_relu(g, f"{name}_3x3", src, cin, b3, k=3)
    p5 = _conv_relu(g, f"{name}_5x5", src, cin, b5, k=5)
    return g.add(f"{name}_cat", ConcatBranch(), p1, p3, p5), b1 + b3 + b5


def _blackbox_multibranch(width):
    g = GraphBuilder()
    stem = _ch(32, width)
    h = _conv_relu(g, "stem", "input", 3, stem)
    h = g.add("pool1", MaxPool2d(2), h)
    h, c = _inception(g, "inc1", h, stem, _ch(16, width), _ch(32, width), _ch(8, width))
    h = g.add("pool2", MaxPool2d(2), h)
    h, c = _inception(g, "inc2", h, c, _ch(32, width), _ch(64, width), _ch(16, width))
    h = g.add("pool3", MaxPool2d(2), h)
    h, c = _inception(g, "inc3", h, c, _ch(24, width), _ch(32, width), _ch(8, width))
    h = g.add("gap", GlobalAvgPool(), h)
    g.add("fc", Dense(c, 10), h)
    return g.nodes


_BUILDERS = {
    "teacher-residual": _teacher_residual,
    "teacher-dense": _teacher_dense,
    "student-plain": _student_plain,
    "blackbox-multibranch": _blackbox_multibranch,
}


def build(role, seed=0, width=1.0, mean=None, std=None, name=None):
    """Fresh model for ``role`` on 3x32x32 inputs and 10 classes."""
    if role not in _BUILDERS:
        raise ValueError(f"unknown role {role!r}; choose from {ROLES}")
    return Model(name or role, (3, 32, 32), 10, _BUILDERS[role](width), mean=mean, std=std, seed=seed)


def count_kind(model, kind):
    return sum(node.layer.kind == kind for node in model.nodes)


def has_multiscale_branch(model):
    """True when some concat joins parallel 1x1, 3x3 and 5x5 convolutions."""
    by_name = {node.name: node for node in model.nodes}

    def kernel_of(name):
        node = by_name.get(name)
        while node is not None and node.layer.kind == "relu":
            node = by_name.get(node.inputs[0])
        return getattr(node.layer, "kernel", None) if node is not None else None

    for node in model.nodes:
        if node.layer.kind == "concat-branch":
            if {kernel_of(src) for src in node.inputs} >= {1, 3, 5}:
                return True
    return False


def train_supervised(model, data, schedule, seed=0, log=None):
    """Cross-entropy training with the shared schedule and early stopping.

    ``data`` is a ``(train, val)`` pair of datasets. Returns the model holding
    the best-validation-accuracy parameters and the :class:`TrainHistory`.
    """
    from .distill import fit, hard_loss_and_grad

    def objective(images, labels, indices, logits, epoch):
        return hard_loss_and_grad(logits, labels)

    return fit(model, data, schedule, objective, seed=seed, log=log)
