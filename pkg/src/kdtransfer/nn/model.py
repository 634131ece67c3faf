"""Layer graphs with one image input and one logits output.

Inputs are ``(B, C, H, W)``; internally activations are channels-last (see
:mod:`.layers`). A :class:`Model` is an ordered list of :class:`Node` objects; each node names
its inputs (earlier nodes or ``"input"``), so skip and branch topologies are
plain DAGs evaluated in declaration order. Raw pixels in ``[0, 255]`` are
normalised per channel inside the forward pass, so every gradient this module
returns is with respect to raw pixels.

Summation order: convolutions and dense layers reduce through a single GEMM
over ``(batch * positions)`` rows, gradients flowing into a node from several
consumers are accumulated in reverse declaration order, and nothing is
threaded at the Python level. Results therefore depend only on the BLAS build.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .functional import cross_entropy
from .layers import DTYPE, Layer, ShapeError, layer_from_text

INPUT = "input"


@dataclass(frozen=True)
class Node:
    name: str
    layer: Layer
    inputs: tuple


class Model:
    """A feed-forward classifier over ``(C, H, W)`` images.

    Parameters are initialised from ``seed`` with fan-in scaled normals
    (``std = sqrt(2 / fan_in)``) and zero biases, drawn in declaration order.
    """

    def __init__(self, name, input_shape, num_classes, nodes, mean=None, std=None, seed=0):
        self.name = name
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self.nodes = list(nodes)
        channels = self.input_shape[0]
        self.mean = np.zeros(channels, DTYPE) if mean is None else np.asarray(mean, DTYPE).copy()
        self.std = np.ones(channels, DTYPE) if std is None else np.asarray(std, DTYPE).copy()
        if self.mean.shape != (channels,) or self.std.shape != (channels,):
            raise ShapeError(f"normalization needs {channels} channel constants")
        if np.any(self.std <= 0):
            raise ValueError("normalization std must be positive")
        self.shapes = self._infer_shapes()
        self.params = {}
        self.reset_parameters(seed)

    def _infer_shapes(self):
        shapes = {INPUT: self.input_shape}
        for node in self.nodes:
            if node.name in shapes:
                raise ShapeError(f"duplicate node name {node.name!r}")
            missing = [i for i in node.inputs if i not in shapes]
            if missing:
                raise ShapeError(f"layer {node.name!r} reads undefined {missing}")
            if node.layer.arity > 0 and len(node.inputs) != node.layer.arity:
                raise ShapeError(f"layer {node.name!r} takes {node.layer.arity} inputs")
            try:
                shapes[node.name] = tuple(node.layer.output_shape(*[shapes[i] for i in node.inputs]))
            except ShapeError as exc:
                raise ShapeError(f"layer {node.name!r} ({node.layer.kind}): {exc}") from None
        out = shapes[self.nodes[-1].name]
        if out != (self.num_classes,):
            raise ShapeError(f"model output {out} != ({self.num_classes},)")
        return shapes

    def param_shapes(self):
        """``{param_name: shape}`` in declaration order."""
        return {
            f"{node.name}.{key}": shape
            for node in self.nodes
            for key, shape in node.layer.param_shapes().items()
        }

    def reset_parameters(self, seed):
        rng = np.random.default_rng(seed)
        self.params = {}
        for node in self.nodes:
            for key, shape in node.layer.param_shapes().items():
                if key == "weight":
                    std = np.sqrt(2.0 / node.layer.fan_in())
                    value = rng.normal(0.0, std, size=shape)
                else:
                    value = np.zeros(shape)
                self.params[f"{node.name}.{key}"] = value.astype(DTYPE)

    @property
    def num_params(self):
        return int(sum(p.size for p in self.params.values()))

    @property
    def descriptor(self):
        """Canonical text form of the architecture (no parameter values)."""
        lines = [
            "input " + " ".join(str(s) for s in self.input_shape),
            f"classes {self.num_classes}",
        ]
        for node in self.nodes:
            hyper = node.layer.describe()
            lines.append(
                f"node {node.name} {node.layer.kind}"
                + (f" {hyper}" if hyper else "")
                + " <- " + " ".join(node.inputs)
            )
        return "\n".join(lines) + "\n"

    @property
    def arch_hash(self):
        return hashlib.sha256(self.descriptor.encode()).hexdigest()

    @classmethod
    def from_descriptor(cls, name, text, mean=None, std=None):
        lines = text.strip().splitlines()
        input_shape = tuple(int(v) for v in lines[0].split()[1:])
        num_classes = int(lines[1].split()[1])
        nodes = []
        for line in lines[2:]:
            head, inputs = line.split(" <- ")
            _, node_name, kind, *hyper = head.split()
            nodes.append(Node(node_name, layer_from_text(kind, " ".join(hyper)), tuple(inputs.split())))
        return cls(name, input_shape, num_classes, nodes, mean=mean, std=std)

    def layer_kinds(self):
        return sorted(node.layer.kind for node in self.nodes)

    def copy(self):
        clone = Model.__new__(Model)
        clone.__dict__.update(self.__dict__)
        clone.mean, clone.std = self.mean.copy(), self.std.copy()
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    @property
    def dtype(self):
        return self.mean.dtype

    def astype(self, dtype):
        """Copy computing in ``dtype`` (float64 copies serve as numerical references)."""
        clone = self.copy()
        clone.mean, clone.std = self.mean.astype(dtype), self.std.astype(dtype)
        clone.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return clone

    def state(self):
        return {k: v.copy() for k, v in self.params.items()}

    def load_state(self, state):
        for key, shape in self.param_shapes().items():
            if state[key].shape != shape:
                raise ShapeError(f"parameter {key!r}: {state[key].shape} != {shape}")
        self.params = {k: np.asarray(state[k], DTYPE).copy() for k in self.param_shapes()}

    def checksum(self):
        digest = hashlib.sha256()
        for key in self.param_shapes():
            digest.update(self.params[key].tobytes())
        return digest.hexdigest()

    # -- evaluation -----------------------------------------------------

    def _check_input(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            consumers = [n.name for n in self.nodes if INPUT in n.inputs]
            raise ShapeError(
                f"layer {consumers[0]!r} expects input (B, {', '.join(map(str, self.input_shape))}), "
                f"got {tuple(x.shape)}"
            )

    def _params_of(self, node):
        return {key: self.params[f"{node.name}.{key}"] for key in node.layer.param_shapes()}

    def forward(self, x, record=False):
        """Logits for a ``(B, C, H, W)`` batch of raw pixels.

        With ``record=True`` also returns the tape needed by :meth:`backward`.
        """
        x = np.asarray(x, dtype=self.dtype)
        self._check_input(x)
        acts = {INPUT: (x.transpose(0, 2, 3, 1) - self.mean) / self.std}
        # last consumer of every activation, so forward-only runs can free early
        last_use = {}
        for idx, node in enumerate(self.nodes):
            for name in node.inputs:
                last_use[name] = idx
        tape = []
        for idx, node in enumerate(self.nodes):
            out, cache = node.layer.forward(self._params_of(node), *[acts[i] for i in node.inputs])
            acts[node.name] = out
            if record:
                tape.append(cache)
            else:
                for name in node.inputs:
                    if last_use[name] == idx:
                        del acts[name]
        logits = acts[self.nodes[-1].name]
        return (logits, tape) if record else logits

    def backward(self, tape, grad_logits, need_params=True):
        """Reverse pass. Returns ``(d/d raw pixels, {param: grad})``.

        Parameters that receive no gradient get explicit zeros.
        """
        grads = {self.nodes[-1].name: np.asarray(grad_logits, dtype=self.dtype)}
        pgrads = {}
        for node, cache in zip(reversed(self.nodes), reversed(tape)):
            g = grads.pop(node.name, None)
            if g is None:
                continue
            in_grads, local = node.layer.backward(self._params_of(node), cache, g, need_params)
            for key, value in local.items():
                pgrads[f"{node.name}.{key}"] = value
            for src, gi in zip(node.inputs, in_grads):
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
        dx = grads.get(INPUT)
        if dx is None:
            b = np.asarray(grad_logits).shape[0]
            dx = np.zeros((b,) + self.input_shape, self.dtype)
        else:
            dx = (dx / self.std).transpose(0, 3, 1, 2)
        if need_params:
            pgrads = {
                key: pgrads.get(key, np.zeros(shape, self.dtype))
                for key, shape in self.param_shapes().items()
            }
        return np.ascontiguousarray(dx, dtype=self.dtype), pgrads

    def predict(self, x, batch_size=500):
        return np.concatenate([
            self.forward(x[i:i + batch_size]).argmax(axis=1)
            for i in range(0, len(x), batch_size)
        ]) if len(x) else np.zeros(0, dtype=np.int64)

    def input_gradient(self, x, y=None, logit_grad=None):
        """Gradient of the per-sample loss with respect to raw pixels.

        By default the loss is cross-entropy against ``y``, summed over the
        batch so each row is that sample's own gradient. A callable
        ``logit_grad(logits) -> dL/dlogits`` replaces it.
        """
        logits, tape = self.forward(x, record=True)
        if logit_grad is None:
            _, g = cross_entropy(logits, y, reduction="sum")
        else:
            g = logit_grad(logits)
            if g.shape != logits.shape:
                raise ShapeError(f"logit gradient {g.shape} != logits {logits.shape}")
        dx, _ = self.backward(tape, g, need_params=False)
        return dx

    def __repr__(self):
        return f"Model({self.name!r}, params={self.num_params}, nodes={len(self.nodes)})"


class GraphBuilder:
    """Small helper for declaring node graphs in order."""

    def __init__(self):
        self.nodes = []

    def add(self, name, layer, *inputs):
        self.nodes.append(Node(name, layer, tuple(inputs)))
        return name


def forward(model, batch):
    return model.forward(batch)


def param_gradients(model, batch, loss_grad_at_logits):
    """Parameter gradients for an upstream gradient at the logits."""
    logits, tape = model.forward(batch, record=True)
    loss_grad_at_logits = np.asarray(loss_grad_at_logits, dtype=DTYPE)
    if loss_grad_at_logits.shape != logits.shape:
        raise ShapeError(f"logit gradient {loss_grad_at_logits.shape} != logits {logits.shape}")
    _, pgrads = model.backward(tape, loss_grad_at_logits)
    return pgrads


def input_gradient(model, x, y=None, loss="cross-entropy"):
    """``d loss / d x`` for raw pixels; ``loss`` is ``"cross-entropy"`` or a logit-gradient callable."""
    if callable(loss):
        return model.input_gradient(x, logit_grad=loss)
    if loss != "cross-entropy":
        raise ValueError(f"unknown loss {loss!r}")
    return model.input_gradient(x, y)
