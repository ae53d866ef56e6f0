"""Computation-graph IR, model files, forward tape and exact gradients."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError

KINDS = ("Input", "Conv2D", "ReLU", "Sigmoid", "Add", "GatedMul", "ConcatC", "BilinearResize", "Output")
GATE_MODES = ("sigmoid", "one_minus_sigmoid")
FORMAT_VERSION = 1

# (min, max) number of inputs; None = unbounded
_ARITY = {
    "Input": (0, 0),
    "Conv2D": (1, 1),
    "ReLU": (1, 1),
    "Sigmoid": (1, 1),
    "Add": (2, None),
    "GatedMul": (2, 2),
    "ConcatC": (1, None),
    "BilinearResize": (1, 1),
    "Output": (1, 1),
}


class GraphError(ValueError):
    """A model description is malformed.  ``errors`` lists every violation found."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class TargetError(ValueError):
    pass


@dataclass
class Node:
    id: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    params: dict = field(default_factory=dict)
    weights: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Graph:
    nodes: list[Node]
    inputs: dict[str, tuple]
    outputs: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {n.id: n for n in self.nodes}

    def node(self, node_id: str) -> Node:
        try:
            return self._index[node_id]
        except KeyError:
            raise KeyError(f"unknown node {node_id!r}") from None

    def __contains__(self, node_id) -> bool:
        return node_id in self._index

    def consumers(self) -> dict[str, list[str]]:
        out = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                if src in out:
                    out[src].append(n.id)
        return out

    def upstream(self, node_id: str) -> set[str]:
        """All nodes ``node_id`` depends on, itself included."""
        seen, stack = set(), [node_id]
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(self.node(nid).inputs)
        return seen

    def downstream(self, node_id: str) -> set[str]:
        cons = self.consumers()
        seen, stack = set(), [node_id]
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(cons[nid])
        return seen


# ---------------------------------------------------------------------------
# validation


def _topo_errors(graph: Graph) -> list[str]:
    errors = []
    ids = [n.id for n in graph.nodes]
    sorter = TopologicalSorter({n.id: [i for i in n.inputs if i in graph] for n in graph.nodes})
    try:
        tuple(sorter.static_order())
    except CycleError as exc:
        cycle = exc.args[1]
        errors.append(f"cycle: {' -> '.join(cycle)}")
        return errors
    pos = {nid: i for i, nid in enumerate(ids)}
    for n in graph.nodes:
        for src in n.inputs:
            if src in pos and pos[src] >= pos[n.id]:
                errors.append(f"node {n.id!r}: input {src!r} appears later in node order")
    return errors


def infer_shapes(graph: Graph) -> tuple[dict[str, tuple], list[str]]:
    """Propagate (n, c, h, w) shapes through the graph in node order."""
    shapes: dict[str, tuple] = {}
    errors = []
    for n in graph.nodes:
        ins = [shapes.get(i) for i in n.inputs]
        if any(s is None for s in ins):
            continue
        p = n.params
        try:
            if n.kind == "Input":
                shape = tuple(int(v) for v in p.get("shape", graph.inputs.get(n.id, ())))
                if len(shape) != 4 or min(shape) < 1:
                    raise ShapeError(f"invalid input shape {shape}", n.id)
            elif n.kind == "Conv2D":
                w = n.weights.get("weight")
                b = n.weights.get("bias")
                if w is None or w.ndim != 4:
                    raise ShapeError("missing or non rank-4 'weight'", n.id)
                if b is not None and b.shape != (w.shape[0],):
                    raise ShapeError(f"bias shape {b.shape} != ({w.shape[0]},)", n.id)
                s = ins[0]
                if s[1] != w.shape[1]:
                    raise ShapeError(f"kernel expects {w.shape[1]} input channels, got {s[1]}", n.id)
                stride, pad = int(p.get("stride", 1)), int(p.get("padding", 0))
                oh = T.conv_output_size(s[2], w.shape[2], stride, pad)
                ow = T.conv_output_size(s[3], w.shape[3], stride, pad)
                if oh < 1 or ow < 1 or stride < 1 or pad < 0:
                    raise ShapeError(f"conv geometry gives output {oh}x{ow}", n.id)
                shape = (s[0], w.shape[0], oh, ow)
            elif n.kind in ("ReLU", "Sigmoid", "Output"):
                shape = ins[0]
            elif n.kind in ("Add", "GatedMul"):
                if any(s != ins[0] for s in ins):
                    raise ShapeError(f"operand shapes differ: {ins}", n.id)
                shape = ins[0]
            elif n.kind == "ConcatC":
                if any((s[0], s[2], s[3]) != (ins[0][0], ins[0][2], ins[0][3]) for s in ins):
                    raise ShapeError(f"cannot concat shapes {ins}", n.id)
                shape = (ins[0][0], sum(s[1] for s in ins), ins[0][2], ins[0][3])
            elif n.kind == "BilinearResize":
                oh, ow = int(p["out_h"]), int(p["out_w"])
                if oh < 1 or ow < 1:
                    raise ShapeError(f"target size {oh}x{ow}", n.id)
                shape = (ins[0][0], ins[0][1], oh, ow)
            else:
                continue
        except ShapeError as exc:
            errors.append(str(exc))
            continue
        except KeyError as exc:
            errors.append(f"node {n.id!r}: missing param {exc.args[0]!r}")
            continue
        shapes[n.id] = shape
    return shapes, errors


def validate(graph: Graph) -> list[str]:
    """Return every violation found in ``graph``; an empty list means valid."""
    errors = []
    seen = set()
    for n in graph.nodes:
        if n.id in seen:
            errors.append(f"duplicate node id {n.id!r}")
        seen.add(n.id)
        if n.kind not in KINDS:
            errors.append(f"node {n.id!r}: unknown kind {n.kind!r}")
            continue
        lo, hi = _ARITY[n.kind]
        if len(n.inputs) < lo or (hi is not None and len(n.inputs) > hi):
            want = f"{lo}" if lo == hi else f">= {lo}" if hi is None else f"{lo}..{hi}"
            errors.append(f"node {n.id!r}: {n.kind} takes {want} inputs, got {len(n.inputs)}")
        for src in n.inputs:
            if src not in graph:
                errors.append(f"node {n.id!r}: references missing node {src!r}")
        if n.kind == "GatedMul" and n.params.get("gate_mode", "sigmoid") not in GATE_MODES:
            errors.append(f"node {n.id!r}: gate_mode must be one of {GATE_MODES}")
        if n.kind == "Conv2D" and "weight" not in n.weights:
            errors.append(f"node {n.id!r}: Conv2D without 'weight'")
    for nid in graph.inputs:
        if nid not in graph or graph.node(nid).kind != "Input":
            errors.append(f"declared input {nid!r} is not an Input node")
    for n in graph.nodes:
        if n.kind == "Input" and n.id not in graph.inputs:
            errors.append(f"Input node {n.id!r} is not declared in inputs")
    out_nodes = [n.id for n in graph.nodes if n.kind == "Output"]
    for nid in graph.outputs:
        if nid not in graph or graph.node(nid).kind != "Output":
            errors.append(f"declared output {nid!r} is not an Output node")
    for nid in out_nodes:
        if nid not in graph.outputs:
            errors.append(f"Output node {nid!r} is not declared in outputs")
    if len(set(graph.outputs)) != len(graph.outputs):
        errors.append("duplicate entries in outputs")
    if errors:
        return errors
    errors.extend(_topo_errors(graph))
    if errors:
        return errors
    reachable = set()
    for n in graph.nodes:
        if n.kind == "Input" or any(i in reachable for i in n.inputs):
            reachable.add(n.id)
    for n in graph.nodes:
        if n.id not in reachable:
            errors.append(f"node {n.id!r} is not reachable from any input")
    _, shape_errors = infer_shapes(graph)
    errors.extend(shape_errors)
    return errors


def check(graph: Graph) -> Graph:
    errors = validate(graph)
    if errors:
        raise GraphError(errors)
    return graph


# ---------------------------------------------------------------------------
# model files


def save_model(graph: Graph, directory) -> Path:
    """Write ``model.json`` and ``weights.bin`` (float32, little endian) into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    nodes = []
    for n in graph.nodes:
        refs = []
        for name in sorted(n.weights):
            arr = np.ascontiguousarray(n.weights[name], dtype="<f4")
            refs.append({"name": name, "shape": list(arr.shape), "byte_offset": len(blob)})
            blob.extend(arr.tobytes())
        nodes.append({"id": n.id, "kind": n.kind, "params": n.params, "inputs": list(n.inputs), "weight_refs": refs})
    manifest = {
        "format_version": FORMAT_VERSION,
        "inputs": [{"id": k, "shape": list(v)} for k, v in graph.inputs.items()],
        "nodes": nodes,
        "outputs": list(graph.outputs),
    }
    if graph.meta:
        manifest["meta"] = graph.meta
    (directory / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (directory / "weights.bin").write_bytes(bytes(blob))
    return directory


def load_model(manifest, weights=None) -> Graph:
    """Load a graph from a manifest path (or model directory) and its weight blob.

    Weights are widened to float64 on load.  Raises :class:`GraphError`
    naming every offending node or field.
    """
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "model.json"
    if weights is None:
        weights = manifest.with_name("weights.bin")
    try:
        desc = json.loads(Path(manifest).read_text())
    except json.JSONDecodeError as exc:
        raise GraphError(f"{manifest}: parse error: {exc}") from None
    blob = Path(weights).read_bytes()
    return graph_from_dict(desc, blob)


def graph_from_dict(desc: dict, blob: bytes) -> Graph:
    errors = []
    if desc.get("format_version") != FORMAT_VERSION:
        errors.append(f"format_version must be {FORMAT_VERSION}, got {desc.get('format_version')!r}")
    for key in ("inputs", "nodes", "outputs"):
        if key not in desc:
            errors.append(f"missing field {key!r}")
    if errors:
        raise GraphError(errors)
    nodes = []
    for i, nd in enumerate(desc["nodes"]):
        nid = nd.get("id", f"#{i}")
        if "id" not in nd or "kind" not in nd:
            errors.append(f"node #{i}: missing 'id' or 'kind'")
            continue
        ws = {}
        for ref in nd.get("weight_refs", []):
            try:
                shape = tuple(int(s) for s in ref["shape"])
                off = int(ref["byte_offset"])
                name = ref["name"]
            except (KeyError, TypeError, ValueError):
                errors.append(f"node {nid!r}: malformed weight_ref {ref!r}")
                continue
            size = int(np.prod(shape)) * 4
            if off < 0 or off + size > len(blob):
                errors.append(f"node {nid!r}: weight {name!r} [{off}, {off + size}) exceeds blob of {len(blob)} bytes")
                continue
            ws[name] = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=off).reshape(shape).astype(np.float64)
        nodes.append(Node(nid, nd["kind"], list(nd.get("inputs", [])), dict(nd.get("params", {})), ws))
    if errors:
        raise GraphError(errors)
    inputs = {d["id"]: tuple(d["shape"]) for d in desc["inputs"]}
    return check(Graph(nodes, inputs, list(desc["outputs"]), dict(desc.get("meta", {}))))


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardTape:
    graph: Graph
    values: dict[str, np.ndarray]
    gates: dict[str, np.ndarray]

    @property
    def outputs(self) -> dict[str, np.ndarray]:
        return {h: self.values[h] for h in self.graph.outputs}

    def __len__(self) -> int:
        return len(self.values)


def _gate_factor(node: Node, gate: np.ndarray) -> np.ndarray:
    return 1.0 - gate if node.params.get("gate_mode", "sigmoid") == "one_minus_sigmoid" else gate


def _run(node: Node, xs: list[np.ndarray]):
    p = node.params
    k = node.kind
    if k == "Conv2D":
        return T.conv2d(xs[0], node.weights["weight"], node.weights.get("bias"), int(p.get("stride", 1)), int(p.get("padding", 0)), node.id), None
    if k == "ReLU":
        return T.pointwise(xs[0], "relu"), None
    if k == "Sigmoid":
        return T.pointwise(xs[0], "sigmoid"), None
    if k == "Add":
        out = xs[0]
        for x in xs[1:]:
            out = T.binary(out, x, "add", node.id)
        return out, None
    if k == "GatedMul":
        gate = T.sigmoid(xs[1])
        return T.binary(xs[0], _gate_factor(node, gate), "mul", node.id), gate
    if k == "ConcatC":
        return T.concat_channels(xs, node.id), None
    if k == "BilinearResize":
        return T.bilinear_resize(xs[0], int(p["out_h"]), int(p["out_w"]), bool(p.get("align_corners", True)), node.id), None
    if k == "Output":
        return xs[0], None
    raise ValueError(f"node {node.id!r}: cannot execute kind {k!r}")


def forward(graph: Graph, x, input_id: str | None = None, *, override: dict | None = None) -> ForwardTape:
    """Execute every node once in order, recording outputs on a tape.

    ``x`` is a single tensor (single-input graphs) or a dict of input id to
    tensor.  The batch extent may differ from the declared one.  ``override``
    maps node ids to callables applied to that node's output before it is
    consumed downstream.
    """
    feeds = x if isinstance(x, dict) else {input_id or next(iter(graph.inputs)): x}
    values, gates = {}, {}
    override = override or {}
    for n in graph.nodes:
        if n.kind == "Input":
            v = T.as_tensor(feeds[n.id], n.id)
            declared = graph.inputs[n.id]
            if v.shape[1:] != tuple(declared[1:]):
                raise ShapeError(f"input shape {v.shape} does not match declared {tuple(declared)}", n.id)
        else:
            v, gate = _run(n, [values[i] for i in n.inputs])
            if gate is not None:
                gates[n.id] = gate
        if n.id in override:
            v = np.asarray(override[n.id](v), dtype=np.float64)
        values[n.id] = v
    return ForwardTape(graph, values, gates)


def forward_from(tape: ForwardTape, node_id: str, value) -> ForwardTape:
    """Re-run only the nodes downstream of ``node_id`` with its output replaced.

    ``value`` may carry a larger batch than the tape; upstream values are
    broadcast along the batch axis.
    """
    graph = tape.graph
    value = np.asarray(value, dtype=np.float64)
    batch = value.shape[0]
    dirty = graph.downstream(node_id)
    values = dict(tape.values)
    gates = dict(tape.gates)
    values[node_id] = value
    for n in graph.nodes:
        if n.id == node_id or n.id not in dirty:
            continue
        xs = [values[i] for i in n.inputs]
        xs = [np.broadcast_to(v, (batch,) + v.shape[1:]) if v.shape[0] != batch else v for v in xs]
        v, gate = _run(n, xs)
        values[n.id] = v
        if gate is not None:
            gates[n.id] = gate
    return ForwardTape(graph, values, gates)


# ---------------------------------------------------------------------------
# targets


@dataclass
class TargetSpec:
    """Which scalar to explain.

    Segmentation: sum of class ``class_index`` logits over ``region`` (an
    (h, w) boolean mask; ``None`` means the predicted argmax region).
    Detection: the class logit at grid ``cell`` = (row, col).
    """

    head: str
    mode: str = "segmentation"
    class_index: int = 0
    region: np.ndarray | None = None
    cell: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        d = {"head": self.head, "mode": self.mode, "class_index": int(self.class_index)}
        if self.cell is not None:
            d["cell"] = [int(v) for v in self.cell]
        if self.region is not None:
            d["region_pixels"] = int(np.count_nonzero(self.region))
        return d


def target_mask(tape: ForwardTape, target: TargetSpec) -> np.ndarray:
    """Indicator array, shaped like the head output, selecting the explained entries."""
    if target.head not in tape.graph.outputs:
        raise TargetError(f"unknown head {target.head!r}; heads are {tape.graph.outputs}")
    out = tape.values[target.head]
    if out.shape[0] != 1:
        raise TargetError("targets are defined for batch size 1")
    _, c, h, w = out.shape
    if not 0 <= target.class_index < c:
        raise TargetError(f"class index {target.class_index} out of range for {c} channels")
    mask = np.zeros(out.shape)
    if target.mode == "segmentation":
        region = target.region
        if region is None:
            region = out[0].argmax(axis=0) == target.class_index
        region = np.asarray(region, dtype=bool)
        if region.shape != (h, w):
            raise TargetError(f"region shape {region.shape} does not match head extents {(h, w)}")
        if not region.any():
            raise TargetError("empty region: nothing to explain")
        mask[0, target.class_index] = region
    elif target.mode == "detection":
        if target.cell is None:
            raise TargetError("detection target needs a cell")
        i, j = target.cell
        if not (0 <= i < h and 0 <= j < w):
            raise TargetError(f"cell {target.cell} outside grid {(h, w)}")
        mask[0, target.class_index, i, j] = 1.0
    else:
        raise TargetError(f"unknown target mode {target.mode!r}")
    return mask


def select_scalar(tape: ForwardTape, target: TargetSpec) -> tuple[float, np.ndarray]:
    """Return the explained scalar and the seed relevance at the head (logits on the selection)."""
    mask = target_mask(tape, target)
    seed = tape.values[target.head] * mask
    return float(seed.sum()), seed


# ---------------------------------------------------------------------------
# gradients


@dataclass
class Gradients:
    nodes: dict[str, np.ndarray]
    weights: dict[tuple[str, str], np.ndarray]


def vjp(tape: ForwardTape, seeds: dict[str, np.ndarray]) -> Gradients:
    """Reverse-mode pass: gradients of <seed, node output> w.r.t. every node output and weight."""
    graph = tape.graph
    grads = {n.id: np.zeros_like(tape.values[n.id]) for n in graph.nodes}
    for nid, s in seeds.items():
        grads[nid] = grads[nid] + s
    wgrads = {}
    for n in reversed(graph.nodes):
        g = grads[n.id]
        k = n.kind
        xs = [tape.values[i] for i in n.inputs]
        if k == "Input":
            continue
        if k == "Conv2D":
            stride, pad = int(n.params.get("stride", 1)), int(n.params.get("padding", 0))
            w = n.weights["weight"]
            grads[n.inputs[0]] += T.conv2d_input_grad(g, w, xs[0].shape, stride, pad)
            wgrads[(n.id, "weight")] = T.conv2d_weight_grad(g, xs[0], w.shape, stride, pad)
            if "bias" in n.weights:
                wgrads[(n.id, "bias")] = g.sum(axis=(0, 2, 3))
        elif k == "ReLU":
            grads[n.inputs[0]] += g * (xs[0] > 0)
        elif k == "Sigmoid":
            s = tape.values[n.id]
            grads[n.inputs[0]] += g * s * (1.0 - s)
        elif k == "Add":
            for src in n.inputs:
                grads[src] += g
        elif k == "GatedMul":
            gate = tape.gates[n.id]
            sign = -1.0 if n.params.get("gate_mode", "sigmoid") == "one_minus_sigmoid" else 1.0
            grads[n.inputs[0]] += g * _gate_factor(n, gate)
            grads[n.inputs[1]] += g * xs[0] * sign * gate * (1.0 - gate)
        elif k == "ConcatC":
            parts = T.split_channels(g, [x.shape[1] for x in xs])
            for src, part in zip(n.inputs, parts):
                grads[src] += part
        elif k == "BilinearResize":
            grads[n.inputs[0]] += T.bilinear_resize_transpose(g, xs[0].shape[2], xs[0].shape[3], bool(n.params.get("align_corners", True)))
        elif k == "Output":
            grads[n.inputs[0]] += g
    return Gradients(grads, wgrads)


def backward_gradient(tape: ForwardTape, target: TargetSpec) -> Gradients:
    """Exact gradient of the explained scalar w.r.t. every node output and weight."""
    mask = target_mask(tape, target)
    return vjp(tape, {target.head: mask})
