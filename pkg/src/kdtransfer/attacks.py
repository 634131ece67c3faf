"""Non-targeted FG, FGS and PGD attacks in raw pixel units.

All attacks ascend the cross-entropy of the true label. Anything with
``forward(x)``, ``input_gradient(x, y)``, ``num_classes`` and ``name`` can be
attacked, including :class:`Ensemble`.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, read_cifar_batch, write_cifar_batch
from .distill import ConfigError
from .evaluation import rmsd_per_image
from .nn import DTYPE, cross_entropy, log_softmax

KINDS = ("fg", "fgs", "pgd")
PIXEL_MIN, PIXEL_MAX = 0.0, 255.0


class CalibrationError(RuntimeError):
    pass


@dataclass
class AttackSpec:
    kind: str
    epsilon: float
    step_size: float | None = None
    iterations: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.kind == "pgd":
            if self.iterations < 1:
                raise ValueError("pgd needs iterations >= 1")
            if self.step_size is None:
                self.step_size = 2.5 * self.epsilon / self.iterations

    def with_epsilon(self, epsilon):
        """Same attack at a new budget; the PGD step is re-derived from it."""
        return AttackSpec(self.kind, float(epsilon), None, self.iterations)


@dataclass
class AttackOutput:
    images: np.ndarray
    rmsd: np.ndarray
    duration_s: float
    attacker: str
    spec: AttackSpec
    meta: dict = field(default_factory=dict)

    @property
    def mean_rmsd(self):
        return float(self.rmsd.mean()) if len(self.rmsd) else 0.0


def _clip(x):
    return np.clip(x, DTYPE(PIXEL_MIN), DTYPE(PIXEL_MAX), out=x)


def _signed_step(x, grad, size):
    return _clip(x + DTYPE(size) * np.sign(grad).astype(DTYPE))


def fgs(model, x, y, epsilon):
    """One signed-gradient step of size ``epsilon``, clipped to valid pixels."""
    x = np.asarray(x, DTYPE)
    if epsilon == 0:
        return x.copy()
    return _signed_step(x, model.input_gradient(x, y), epsilon)


def fg(model, x, y, epsilon):
    """One step of ℓ2 length ``epsilon`` along each image's gradient."""
    x = np.asarray(x, DTYPE)
    if epsilon == 0:
        return x.copy()
    g = model.input_gradient(x, y).astype(np.float64)
    norms = np.sqrt((g.reshape(len(g), -1) ** 2).sum(axis=1))
    scale = np.where(norms > 1e-12, epsilon / np.maximum(norms, 1e-300), 0.0)
    delta = (g * scale[:, None, None, None]).astype(DTYPE)
    return _clip(x + delta)


def pgd(model, x, y, epsilon, step_size=None, iterations=10):
    """Signed steps from ``x`` with ℓ∞ projection and clipping after each one."""
    x = np.asarray(x, DTYPE)
    if epsilon == 0:
        return x.copy()
    if step_size is None:
        step_size = 2.5 * epsilon / iterations
    eps = DTYPE(epsilon)
    lo, hi = x - eps, x + eps
    adv = x.copy()
    for _ in range(iterations):
        adv = _signed_step(adv, model.input_gradient(adv, y), step_size)
        np.clip(adv, lo, hi, out=adv)
        _clip(adv)
    return adv


def run_attack(model, x, y, spec):
    if spec.kind == "fgs":
        return fgs(model, x, y, spec.epsilon)
    if spec.kind == "fg":
        return fg(model, x, y, spec.epsilon)
    return pgd(model, x, y, spec.epsilon, spec.step_size, spec.iterations)


def generate(model, images, labels, spec, batch_size=150, warmup=True):
    """Attack a whole set serially in batches and time it.

    One untimed warm-up batch runs first when ``warmup`` is set; the reported
    duration covers gradient computation, stepping and projection for every
    batch, and nothing else.
    """
    images = np.asarray(images, DTYPE)
    if warmup and len(images):
        run_attack(model, images[:batch_size], labels[:batch_size], spec)
    out = np.empty_like(images)
    start = time.perf_counter()
    for i in range(0, len(images), batch_size):
        out[i:i + batch_size] = run_attack(model, images[i:i + batch_size], labels[i:i + batch_size], spec)
    duration = time.perf_counter() - start
    return AttackOutput(out, rmsd_per_image(images, out), duration, getattr(model, "name", "model"), spec,
                        meta={"batch_size": batch_size, "parallelism": "serial"})


class Ensemble:
    """Weighted average of member logits (or of probabilities).

    In ``"prob"`` mode the ensemble output is ``log(sum_i w_i softmax(z_i))``
    so argmax and cross-entropy keep their meaning.
    """

    def __init__(self, models, weights=None, mode="logits", name="ensemble"):
        if not models:
            raise ConfigError("ensemble needs at least one model")
        classes = {m.num_classes for m in models}
        if len(classes) != 1:
            raise ConfigError(f"ensemble members disagree on class count: {sorted(classes)}")
        if weights is None:
            weights = [1.0 / len(models)] * len(models)
        if len(weights) != len(models) or abs(sum(weights) - 1.0) > 1e-6:
            raise ConfigError("ensemble weights must match members and sum to 1")
        if mode not in ("logits", "prob"):
            raise ConfigError(f"unknown ensemble mode {mode!r}")
        self.models, self.weights, self.mode, self.name = list(models), list(weights), mode, name
        self.num_classes = models[0].num_classes
        self.input_shape = models[0].input_shape

    def forward(self, x):
        outs = [m.forward(x) for m in self.models]
        if self.mode == "logits":
            return sum(w * z for w, z in zip(self.weights, outs))
        probs = sum(w * np.exp(log_softmax(z)) for w, z in zip(self.weights, outs))
        return np.log(probs).astype(outs[0].dtype)

    def predict(self, x, batch_size=500):
        return np.concatenate([self.forward(x[i:i + batch_size]).argmax(axis=1)
                               for i in range(0, len(x), batch_size)])

    def input_gradient(self, x, y=None, logit_grad=None):
        records = [m.forward(x, record=True) for m in self.models]
        if self.mode == "logits":
            avg = sum(w * z for w, (z, _) in zip(self.weights, records))
            if logit_grad is None:
                _, g = cross_entropy(avg, y, reduction="sum")
            else:
                g = logit_grad(avg)
            upstream = [w * g for w in self.weights]
        else:
            if logit_grad is not None:
                raise ConfigError("probability-mode ensembles only support cross-entropy")
            rows = np.arange(len(y))
            soft = [np.exp(log_softmax(z)) for z, _ in records]
            p_y = sum(w * s[rows, y] for w, s in zip(self.weights, soft))
            upstream = []
            for w, s in zip(self.weights, soft):
                onehot = np.zeros_like(s)
                onehot[rows, y] = 1.0
                coef = -(w * s[rows, y] / p_y)[:, None]
                upstream.append((coef * (onehot - s)).astype(DTYPE))
        total = None
        for m, (_, tape), g in zip(self.models, records, upstream):
            dx, _ = m.backward(tape, g, need_params=False)
            total = dx if total is None else total + dx
        return total


def ensemble_model(models, weights=None, mode="logits", name="ensemble"):
    return Ensemble(models, weights, mode, name)


def _rmsd_bracket_top(kind, shape):
    # fg measures epsilon as an l2 norm, so its bracket is the l2 norm of a
    # full-range per-pixel change
    return PIXEL_MAX * float(np.sqrt(np.prod(shape))) if kind == "fg" else PIXEL_MAX


def calibrate_epsilon(kind, model, images, labels, target_rmsd=25.0, tolerance=1.0,
                      max_bisections=30, iterations=10, batch_size=150, slack=0.05):
    """Bisect epsilon until the mean RMSD is within ``tolerance`` of the target.

    Returns ``(epsilon, achieved_rmsd, trace)``. The search asserts that RMSD
    grows with epsilon (up to ``slack``) and raises :class:`CalibrationError`
    when the target lies outside the bracket.
    """
    images = np.asarray(images, DTYPE)
    if len(images) == 0:
        raise CalibrationError("empty calibration set")
    lo, hi = 0.0, _rmsd_bracket_top(kind, images.shape[1:])
    trace = []

    def measure(eps):
        spec = AttackSpec(kind, eps, iterations=iterations)
        adv = np.concatenate([
            run_attack(model, images[i:i + batch_size], labels[i:i + batch_size], spec)
            for i in range(0, len(images), batch_size)
        ])
        value = float(rmsd_per_image(images, adv).mean())
        for e, r in trace:
            if (e < eps and r > value + slack) or (e > eps and r < value - slack):
                raise CalibrationError(
                    f"{kind}: RMSD not monotone in epsilon ({e:.4g} -> {r:.4g}, {eps:.4g} -> {value:.4g})")
        trace.append((eps, value))
        return value

    top = measure(hi)
    if top < target_rmsd - tolerance:
        raise CalibrationError(
            f"{kind}: target RMSD {target_rmsd} unattainable; bracket [{lo}, {hi}] "
            f"reaches at most {top:.4g}")
    for _ in range(max_bisections):
        mid = 0.5 * (lo + hi)
        value = measure(mid)
        if abs(value - target_rmsd) <= tolerance:
            return mid, value, trace
        if value < target_rmsd:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        f"{kind}: no epsilon within {max_bisections} bisections; bracket [{lo:.6g}, {hi:.6g}]")


# -- persistence ----------------------------------------------------------


def save_attack(output, labels, stem, extra=None):
    """Write ``stem.bin`` (CIFAR-10 record layout) and ``stem.json``.

    Pixels are stored as float32 in ``stem.npy`` too, since the record layout
    rounds to bytes.
    """
    write_cifar_batch(Dataset(np.clip(output.images, 0, 255), np.asarray(labels), "test"), stem + ".bin")
    np.save(stem + ".npy", output.images)
    meta = {
        "attacker": output.attacker,
        "spec": asdict(output.spec),
        "epsilon": output.spec.epsilon,
        "mean_rmsd": output.mean_rmsd,
        "duration_s": output.duration_s,
        "count": int(len(output.images)),
        **output.meta,
        **(extra or {}),
    }
    with open(stem + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return meta


def load_attack(stem):
    with open(stem + ".json") as fh:
        meta = json.load(fh)
    images, labels = read_cifar_batch(stem + ".bin")
    return images, labels, meta
