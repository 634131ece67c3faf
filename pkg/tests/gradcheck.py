"""Central finite-difference oracle, independent of the engine's backward pass.

Losses are evaluated on a float64 copy of the model so that a step of 1e-2
resolves the gradient; the analytic side stays float32. A coordinate whose
+-h probes land in different ReLU / max-pool activation patterns straddles a
kink, where a central difference is not a valid reference, and is skipped.
"""

import numpy as np

from kdtransfer.nn import MaxPool2d, ReLU

H = 1e-2


def pattern(model, x):
    _, tape = model.forward(x, record=True)
    parts = []
    for node, cache in zip(model.nodes, tape):
        if isinstance(node.layer, ReLU):
            parts.append(np.packbits(cache))
        elif isinstance(node.layer, MaxPool2d):
            inp, out = cache
            ho, wo = out.shape[1], out.shape[2]
            for i, j in node.layer._offsets():
                parts.append(np.packbits(node.layer._slice(inp, i, j, ho, wo) == out))
    return b"".join(p.tobytes() for p in parts)


def ce64(model, x, y):
    z = model.forward(x).astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float((lse - z[np.arange(len(y)), y]).sum())


def rel_err(a, b, floor):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_input_gradient(model, x, y, count=100, seed=0, h=H):
    """Returns (relative errors, skipped) over ``count`` usable coordinates."""
    analytic = model.input_gradient(x, y).astype(np.float64)
    ref = model.astype(np.float64)
    x64 = x.astype(np.float64)
    floor = 1e-4 * np.abs(analytic).max()
    rng = np.random.default_rng(seed)
    errs, skipped = [], 0
    while len(errs) < count:
        idx = tuple(rng.integers(0, s) for s in x.shape)
        plus, minus = x64.copy(), x64.copy()
        plus[idx] += h
        minus[idx] -= h
        if pattern(ref, plus) != pattern(ref, minus):
            skipped += 1
            continue
        fd = (ce64(ref, plus, y) - ce64(ref, minus, y)) / (2 * h)
        errs.append(rel_err(analytic[idx], fd, floor))
    return np.array(errs), skipped


def check_param_gradient(model, x, y, count=100, seed=0, h=H):
    logits, tape = model.forward(x, record=True)
    z = logits.astype(np.float64)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(y)), y] -= 1
    _, grads = model.backward(tape, p)
    ref = model.astype(np.float64)
    x64 = x.astype(np.float64)
    names = list(model.params)
    floor = 1e-4 * max(np.abs(g).max() for g in grads.values())
    rng = np.random.default_rng(seed)
    errs, skipped = [], 0
    while len(errs) < count:
        name = names[rng.integers(len(names))]
        idx = tuple(rng.integers(0, s) for s in model.params[name].shape)
        base = ref.params[name][idx]
        vals = []
        pats = []
        for sign in (1, -1):
            ref.params[name][idx] = base + sign * h
            pats.append(pattern(ref, x64))
            vals.append(ce64(ref, x64, y))
        ref.params[name][idx] = base
        if pats[0] != pats[1]:
            skipped += 1
            continue
        fd = (vals[0] - vals[1]) / (2 * h)
        errs.append(rel_err(float(grads[name][idx]), fd, floor))
    return np.array(errs), skipped
