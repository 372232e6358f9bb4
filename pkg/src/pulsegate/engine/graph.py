"""Fixed-topology differentiable graphs over the layer set in layers.py.

A ModelGraph is an ordered list of LayerSpec nodes; each node names its
inputs, which must be graph inputs or earlier nodes, so the graph is
acyclic by construction. Parameters live in a flat store keyed
"<node>.<param>" with a same-shaped gradient slot each.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from .layers import LAYER_OPS

HE_UNIFORM_GAIN = 6.0


@dataclass(frozen=True)
class LayerSpec:
    """One node: a layer kind, its wiring and its kind-specific options."""

    kind: str
    name: str
    inputs: tuple[str, ...]
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_OPS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        LAYER_OPS[self.kind].validate(self.options)
        if not getattr(LAYER_OPS[self.kind], "variadic", False) and len(self.inputs) != 1:
            raise ValueError(f"{self.kind} node {self.name!r} takes one input, "
                             f"got {len(self.inputs)}")


def _fan_in(kind: str, shapes: dict) -> int:
    if kind == "conv1d":
        f, c, k = shapes["weight"]
        return c * k
    return shapes["weight"].shape[0] if isinstance(shapes["weight"], np.ndarray) \
        else shapes["weight"][0]


class ModelGraph:
    """Executable network description with a parameter/gradient store.

    input_shapes and all inferred shapes exclude the batch dimension.
    """

    def __init__(self, nodes, input_shapes, output_names=None,
                 dtype=np.float32, seed: int = 0):
        self.nodes: list[LayerSpec] = list(nodes)
        self.input_shapes = {k: tuple(v) for k, v in input_shapes.items()}
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)

        names = set(self.input_shapes)
        for node in self.nodes:
            if node.name in names:
                raise ValueError(f"duplicate node name {node.name!r}")
            for src in node.inputs:
                if src not in names:
                    raise ValueError(f"node {node.name!r} reads {src!r} before "
                                     "it is defined (graph must be acyclic)")
            names.add(node.name)

        self.output_names = tuple(output_names) if output_names \
            else (self.nodes[-1].name,)
        for out in self.output_names:
            if out not in names or out in self.input_shapes:
                raise ValueError(f"output {out!r} is not a node of the graph")

        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.running: dict[str, dict[str, np.ndarray]] = {}
        self.shapes: dict[str, tuple] = dict(self.input_shapes)
        self._frame = None

        init_rng = np.random.default_rng(self.seed)
        for node in self.nodes:
            op = LAYER_OPS[node.kind]
            in_shapes = [self.shapes[src] for src in node.inputs]
            self.shapes[node.name] = op.out_shape(node.options, in_shapes)
            pshapes = op.param_shapes(node.options, in_shapes)
            for pname in op.param_names:
                key = f"{node.name}.{pname}"
                shape = pshapes[pname]
                if pname in ("weight",):
                    fan_in = _fan_in(node.kind, pshapes)
                    limit = np.sqrt(HE_UNIFORM_GAIN / fan_in)
                    value = init_rng.uniform(-limit, limit, shape)
                elif pname == "gamma":
                    value = np.ones(shape)
                else:  # bias, beta
                    value = np.zeros(shape)
                self.params[key] = value.astype(self.dtype)
                self.grads[key] = np.zeros(shape, dtype=self.dtype)
            if node.kind == "batchnorm":
                c = self.shapes[node.name][0]
                self.running[node.name] = {
                    "mean": np.zeros(c, dtype=self.dtype),
                    "var": np.ones(c, dtype=self.dtype),
                }

    # -- bookkeeping ------------------------------------------------------

    def node(self, name: str) -> LayerSpec:
        for node in self.nodes:
            if node.name == name:
                return node
        raise KeyError(name)

    def node_params(self, node: LayerSpec) -> dict[str, np.ndarray]:
        return {p: self.params[f"{node.name}.{p}"] for p in LAYER_OPS[node.kind].param_names}

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def activation(self, name: str) -> np.ndarray:
        """Activation of a node from the most recent forward pass."""
        if self._frame is None:
            raise RuntimeError("no forward pass has been run on this graph")
        return self._frame["acts"][name]

    def param_bytes(self) -> bytes:
        """Concatenated little-endian parameter bytes, declaration order."""
        chunks = []
        for node in self.nodes:
            for pname in LAYER_OPS[node.kind].param_names:
                arr = self.params[f"{node.name}.{pname}"]
                chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(chunks)


def forward(graph: ModelGraph, inputs, mode: str = "infer"):
    """Run the graph on a batch.

    inputs is a (batch, *shape) array for single-input graphs or a mapping
    of input name to array. Returns the sole output array, or a dict keyed
    by output name when the graph declares several outputs. Activations
    and per-node caches are retained for backward().
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if not isinstance(inputs, dict):
        if len(graph.input_shapes) != 1:
            raise ValueError("graph has several inputs; pass a dict of arrays")
        inputs = {next(iter(graph.input_shapes)): inputs}

    acts: dict[str, np.ndarray] = {}
    for name, want in graph.input_shapes.items():
        if name not in inputs:
            raise ValueError(f"missing graph input {name!r}")
        x = np.asarray(inputs[name], dtype=graph.dtype)
        if x.shape[1:] != want:
            raise ValueError(f"input {name!r} has shape {x.shape[1:]}, "
                             f"graph declares {want}")
        acts[name] = x

    for key, p in graph.params.items():
        if not np.all(np.isfinite(p)):
            raise ValueError(f"parameter {key!r} contains non-finite values")

    caches: dict[str, object] = {}
    for node in graph.nodes:
        op = LAYER_OPS[node.kind]
        xs = [acts[src] for src in node.inputs]
        ctx = SimpleNamespace(mode=mode, rng=graph.rng,
                              running=graph.running.get(node.name))
        y, cache = op.forward(xs, graph.node_params(node), node.options, ctx)
        acts[node.name] = y
        caches[node.name] = cache

    graph._frame = {"acts": acts, "caches": caches, "mode": mode}
    if len(graph.output_names) == 1:
        return acts[graph.output_names[0]]
    return {name: acts[name] for name in graph.output_names}


def backward(graph: ModelGraph, loss_grad) -> dict[str, np.ndarray]:
    """Backpropagate output gradients through the last forward pass.

    loss_grad is an array (single-output graphs) or a dict keyed by output
    name. Parameter gradients are accumulated into graph.grads; the
    returned store also maps each graph input to its gradient.
    """
    if graph._frame is None:
        raise RuntimeError("backward() without a cached forward pass; "
                           "run forward() first")
    acts, caches = graph._frame["acts"], graph._frame["caches"]

    if not isinstance(loss_grad, dict):
        if len(graph.output_names) != 1:
            raise ValueError("graph has several outputs; pass a dict of gradients")
        loss_grad = {graph.output_names[0]: loss_grad}
    for name in loss_grad:
        if name not in graph.output_names:
            raise ValueError(f"{name!r} is not an output of the graph")

    grad_acc: dict[str, np.ndarray] = {}
    for name, g in loss_grad.items():
        g = np.asarray(g, dtype=graph.dtype)
        if g.shape != acts[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, "
                             f"output has {acts[name].shape}")
        grad_acc[name] = g.copy()

    graph.zero_grads()
    for node in reversed(graph.nodes):
        gout = grad_acc.pop(node.name, None)
        if gout is None:
            continue
        op = LAYER_OPS[node.kind]
        gxs, pgrads = op.backward(gout, caches[node.name],
                                  graph.node_params(node), node.options)
        for pname, g in pgrads.items():
            graph.grads[f"{node.name}.{pname}"] += g.astype(graph.dtype)
        for src, gx in zip(node.inputs, gxs):
            if src in grad_acc:
                grad_acc[src] = grad_acc[src] + gx
            else:
                grad_acc[src] = gx

    store = dict(graph.grads)
    for name in graph.input_shapes:
        store[name] = grad_acc.get(
            name, np.zeros(acts[name].shape, dtype=graph.dtype))
    return store
