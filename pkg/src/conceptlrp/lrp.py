"""Layer-wise relevance propagation over a :class:`~conceptlrp.graph.ForwardTape`.

Each node redistributes the relevance sitting on its output onto its inputs
according to the rule assigned to it.  Whatever a rule does not pass on
(bias share, stabilizer share, outputs with a vanishing denominator) is
recorded as *absorbed*, so that for every node

    incoming = outgoing + absorbed

holds up to rounding, and globally the input relevance plus everything
absorbed equals the total seed relevance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import ForwardTape, Node

# ---------------------------------------------------------------------------
# rules


@dataclass(frozen=True)
class Epsilon:
    eps: float = 1e-6

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("epsilon must be non-negative")


@dataclass(frozen=True)
class ZPlus:
    pass


@dataclass(frozen=True)
class Gamma:
    gamma: float = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass(frozen=True)
class GatedSignalTakeAll:
    pass


@dataclass(frozen=True)
class PassThrough:
    pass


Rule = Epsilon | ZPlus | Gamma | GatedSignalTakeAll | PassThrough

LINEAR_KINDS = ("Conv2D", "Add", "BilinearResize")
_STRUCTURAL = ("Input", "ConcatC", "Output")


class RuleConfigError(ValueError):
    pass


def parse_rule(text: str) -> Rule:
    """Parse ``epsilon``, ``epsilon:1e-6``, ``zplus``, ``gamma:0.25``, ``gated``, ``passthrough``."""
    name, _, arg = text.strip().partition(":")
    name = name.strip().lower()
    try:
        if name in ("epsilon", "eps"):
            return Epsilon(float(arg)) if arg else Epsilon()
        if name in ("zplus", "z+"):
            return ZPlus()
        if name == "gamma":
            return Gamma(float(arg)) if arg else Gamma()
        if name in ("gated", "signal-take-all", "gatedsignaltakeall"):
            return GatedSignalTakeAll()
        if name in ("passthrough", "identity"):
            return PassThrough()
    except ValueError as exc:
        raise RuleConfigError(f"bad rule {text!r}: {exc}") from None
    raise RuleConfigError(f"unknown rule {text!r}")


def format_rule(rule: Rule) -> str:
    if isinstance(rule, Epsilon):
        return f"epsilon:{rule.eps!r}"
    if isinstance(rule, Gamma):
        return f"gamma:{rule.gamma!r}"
    return {ZPlus: "zplus", GatedSignalTakeAll: "gated", PassThrough: "passthrough"}[type(rule)]


def default_rules(eps: float = 1e-6) -> dict[str, Rule]:
    return {
        "Conv2D": Epsilon(eps),
        "Add": Epsilon(eps),
        "BilinearResize": Epsilon(eps),
        "GatedMul": GatedSignalTakeAll(),
        "ReLU": PassThrough(),
        "Sigmoid": PassThrough(),
    }


@dataclass
class RuleAssignment:
    """Rule per node kind, with optional per-node overrides."""

    defaults: dict[str, Rule] = field(default_factory=default_rules)
    overrides: dict[str, Rule] = field(default_factory=dict)

    @classmethod
    def uniform_epsilon(cls, eps: float) -> "RuleAssignment":
        return cls(default_rules(eps))

    def rule_for(self, node: Node) -> Rule | None:
        if node.kind in _STRUCTURAL:
            return None
        rule = self.overrides.get(node.id, self.defaults.get(node.kind))
        if rule is None:
            raise RuleConfigError(f"node {node.id!r}: no rule assigned for kind {node.kind}")
        if node.kind in LINEAR_KINDS and not isinstance(rule, (Epsilon, ZPlus, Gamma)):
            raise RuleConfigError(f"node {node.id!r}: {type(rule).__name__} does not apply to {node.kind}")
        if node.kind == "GatedMul" and not isinstance(rule, (GatedSignalTakeAll, Epsilon)):
            raise RuleConfigError(f"node {node.id!r}: GatedMul takes the gated rule or an explicit epsilon")
        if node.kind in ("ReLU", "Sigmoid") and not isinstance(rule, PassThrough):
            raise RuleConfigError(f"node {node.id!r}: activations only support passthrough")
        return rule

    def to_dict(self) -> dict:
        return {
            "defaults": {k: format_rule(v) for k, v in sorted(self.defaults.items())},
            "overrides": {k: format_rule(v) for k, v in sorted(self.overrides.items())},
        }


# ---------------------------------------------------------------------------
# linear layer contexts
#
# A context exposes a bias-free linear map ``apply(xs, w)`` over its inputs
# and the adjoint ``apply_t(s, w)``.  ``weight`` is None for maps whose
# implicit weights are all non-negative (sums, interpolation).


class LinearContext:
    weight = None
    bias = None

    def __init__(self, xs):
        self.xs = [np.asarray(x, dtype=np.float64) for x in xs]

    def apply(self, xs, w):
        raise NotImplementedError

    def apply_t(self, s, w):
        raise NotImplementedError


class DenseContext(LinearContext):
    """z_ij = x_i * W[i, j] for a vector ``x`` and matrix ``W`` (n_in, n_out)."""

    def __init__(self, x, weight, bias=None):
        super().__init__([x])
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)

    def apply(self, xs, w):
        return xs[0] @ w

    def apply_t(self, s, w):
        return [w @ s]


class ConvContext(LinearContext):
    def __init__(self, x, weight, bias=None, stride=1, padding=0):
        super().__init__([x])
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)[None, :, None, None]
        self.stride, self.padding = stride, padding

    def apply(self, xs, w):
        return T.conv2d(xs[0], w, None, self.stride, self.padding)

    def apply_t(self, s, w):
        return [T.conv2d_input_grad(s, w, self.xs[0].shape, self.stride, self.padding)]


class SumContext(LinearContext):
    def apply(self, xs, w):
        return sum(xs[1:], xs[0])

    def apply_t(self, s, w):
        return [s for _ in self.xs]


class ResizeContext(LinearContext):
    def __init__(self, x, out_h, out_w, align_corners=True):
        super().__init__([x])
        self.out_h, self.out_w, self.align = out_h, out_w, align_corners

    def apply(self, xs, w):
        return T.bilinear_resize(xs[0], self.out_h, self.out_w, self.align)

    def apply_t(self, s, w):
        x = self.xs[0]
        return [T.bilinear_resize_transpose(s, x.shape[2], x.shape[3], self.align)]


def _context(node: Node, tape: ForwardTape) -> LinearContext:
    xs = [tape.values[i] for i in node.inputs]
    if node.kind == "Conv2D":
        p = node.params
        return ConvContext(xs[0], node.weights["weight"], node.weights.get("bias"), int(p.get("stride", 1)), int(p.get("padding", 0)))
    if node.kind == "Add":
        return SumContext(xs)
    if node.kind == "BilinearResize":
        p = node.params
        return ResizeContext(xs[0], int(p["out_h"]), int(p["out_w"]), bool(p.get("align_corners", True)))
    raise RuleConfigError(f"node {node.id!r}: {node.kind} is not a linear layer")


def _sign(z):
    # sign(0) = +1 so the stabilizer never vanishes
    return np.where(z >= 0, 1.0, -1.0)


def _normalize(R, denom, extra):
    """Split R / denom into the propagated ratio and the absorbed amount.

    ``extra`` is the part of ``denom`` that does not correspond to input
    contributions (bias, stabilizer).  Outputs with a zero denominator are
    dropped entirely.
    """
    zero = denom == 0
    safe = np.where(zero, 1.0, denom)
    s = np.where(zero, 0.0, R / safe)
    absorbed = np.where(zero, R, R * extra / safe)
    return s, float(absorbed.sum())


def rule_epsilon(ctx: LinearContext, R_out, eps: float):
    """Epsilon rule.  Returns (relevance per input, absorbed amount)."""
    R_out = np.asarray(R_out, dtype=np.float64)
    z = ctx.apply(ctx.xs, ctx.weight)
    bias = 0.0 if ctx.bias is None else ctx.bias
    zb = z + bias
    stab = eps * _sign(zb)
    s, absorbed = _normalize(R_out, zb + stab, bias + stab)
    c = ctx.apply_t(s, ctx.weight)
    return [x * ci for x, ci in zip(ctx.xs, c)], absorbed


def rule_zplus(ctx: LinearContext, R_out):
    """z+ rule: redistribute over positive contributions x_i w_ij only.  Bias is ignored."""
    R_out = np.asarray(R_out, dtype=np.float64)
    xp = [np.maximum(x, 0.0) for x in ctx.xs]
    if ctx.weight is None:
        terms = [(xp, None)]
    else:
        xn = [np.minimum(x, 0.0) for x in ctx.xs]
        terms = [(xp, np.maximum(ctx.weight, 0.0)), (xn, np.minimum(ctx.weight, 0.0))]
    denom = sum(ctx.apply(xs, w) for xs, w in terms)
    s, absorbed = _normalize(R_out, denom, 0.0)
    R_in = [np.zeros_like(x) for x in ctx.xs]
    for xs, w in terms:
        for k, ci in enumerate(ctx.apply_t(s, w)):
            R_in[k] += xs[k] * ci
    return R_in, absorbed


def rule_gamma(ctx: LinearContext, R_out, gamma: float):
    """Gamma rule: contributions x_i (w_ij + gamma w_ij^+), normalized as epsilon with eps = 0."""
    R_out = np.asarray(R_out, dtype=np.float64)
    if ctx.weight is None:
        w = None
        scale = 1.0 + gamma
    else:
        w = ctx.weight + gamma * np.maximum(ctx.weight, 0.0)
        scale = 1.0
    z = scale * ctx.apply(ctx.xs, w)
    bias = 0.0 if ctx.bias is None else ctx.bias
    s, absorbed = _normalize(R_out, z + bias, bias)
    c = ctx.apply_t(s, w)
    return [scale * x * ci for x, ci in zip(ctx.xs, c)], absorbed


def rule_gated_signal_take_all(R_out):
    """All relevance to the signal input, none to the gate, for either gate mode."""
    R_out = np.asarray(R_out, dtype=np.float64)
    return R_out.copy(), np.zeros_like(R_out)


def rule_passthrough(R_out):
    return np.array(R_out, dtype=np.float64, copy=True)


def split_concat(R_out, extents):
    return T.split_channels(R_out, extents)


# ---------------------------------------------------------------------------
# backward pass


@dataclass
class NodeLedger:
    node: str
    kind: str
    incoming: float
    outgoing: float
    absorbed: float

    @property
    def residual(self) -> float:
        return self.incoming - self.outgoing - self.absorbed


@dataclass
class ConservationReport:
    nodes: list[NodeLedger]
    seed_total: float
    input_total: float

    @property
    def absorbed_total(self) -> float:
        return float(sum(e.absorbed for e in self.nodes))

    @property
    def global_residual(self) -> float:
        return self.seed_total - self.input_total - self.absorbed_total

    def violations(self, tol: float = 1e-9) -> list[NodeLedger]:
        return [e for e in self.nodes if abs(e.residual) > tol]

    def entry(self, node_id: str) -> NodeLedger:
        for e in self.nodes:
            if e.node == node_id:
                return e
        raise KeyError(node_id)

    def summary(self) -> dict:
        return {
            "seed_total": self.seed_total,
            "input_total": self.input_total,
            "absorbed_total": self.absorbed_total,
            "global_residual": self.global_residual,
            "max_node_residual": max((abs(e.residual) for e in self.nodes), default=0.0),
            "flagged_nodes": [e.node for e in self.violations()],
        }


@dataclass
class RelevanceTape:
    graph: object
    relevance: dict[str, np.ndarray]
    report: ConservationReport

    def __getitem__(self, node_id: str) -> np.ndarray:
        return self.relevance[node_id]

    def input_relevance(self, input_id: str | None = None) -> np.ndarray:
        inputs = [n.id for n in self.graph.nodes if n.kind == "Input"]
        return self.relevance[input_id or inputs[0]]


def conservation_report(ledger: list[NodeLedger], seed_total: float, input_total: float) -> ConservationReport:
    return ConservationReport(ledger, float(seed_total), float(input_total))


def _propagate(node: Node, rule, tape: ForwardTape, R):
    """Return (per-input relevance list, absorbed)."""
    if node.kind == "ConcatC":
        return split_concat(R, [tape.values[i].shape[1] for i in node.inputs]), 0.0
    if node.kind == "Output" or isinstance(rule, PassThrough):
        return [rule_passthrough(R)], 0.0
    if isinstance(rule, GatedSignalTakeAll):
        return list(rule_gated_signal_take_all(R)), 0.0
    if node.kind == "GatedMul":
        # explicit epsilon alternative: gate factor treated as a fixed weight
        x = tape.values[node.inputs[0]]
        z = tape.values[node.id]
        stab = rule.eps * _sign(z)
        s, absorbed = _normalize(R, z + stab, stab)
        return [z * s, np.zeros_like(x)], absorbed
    ctx = _context(node, tape)
    if isinstance(rule, Epsilon):
        return rule_epsilon(ctx, R, rule.eps)
    if isinstance(rule, ZPlus):
        return rule_zplus(ctx, R)
    if isinstance(rule, Gamma):
        return rule_gamma(ctx, R, rule.gamma)
    raise RuleConfigError(f"node {node.id!r}: unsupported rule {rule!r}")


def lrp_backward(tape: ForwardTape, seed=None, assignment: RuleAssignment | None = None, *,
                 head: str | None = None, seeds: dict | None = None,
                 channel_masks: dict | None = None) -> RelevanceTape:
    """Propagate relevance from a head back to the graph inputs.

    ``seed`` is placed on ``head`` (default: the only head).  ``seeds`` may
    instead place relevance on arbitrary nodes.  ``channel_masks`` maps node
    ids to boolean per-channel masks applied to that node's relevance before
    it is redistributed (the masked-out part is recorded as absorbed).
    """
    graph = tape.graph
    assignment = assignment or RuleAssignment()
    if seeds is None:
        head = head or graph.outputs[0]
        seeds = {head: seed}
    R = {n.id: np.zeros_like(tape.values[n.id]) for n in graph.nodes}
    for nid, s in seeds.items():
        s = np.asarray(s, dtype=np.float64)
        if s.shape != R[nid].shape:
            raise T.ShapeError(f"seed shape {s.shape} does not match {R[nid].shape}", nid)
        R[nid] = R[nid] + s
    seed_total = float(sum(np.sum(s) for s in seeds.values()))
    channel_masks = channel_masks or {}
    ledger = []
    input_total = 0.0
    for n in reversed(graph.nodes):
        rule = assignment.rule_for(n)
        r = R[n.id]
        if n.kind == "Input":
            input_total += float(r.sum())
            continue
        incoming = float(r.sum())
        masked = 0.0
        if n.id in channel_masks:
            keep = np.asarray(channel_masks[n.id], dtype=bool)[None, :, None, None]
            masked = float(np.where(keep, 0.0, r).sum())
            r = np.where(keep, r, 0.0)
            R[n.id] = r
        if not r.any():
            ledger.append(NodeLedger(n.id, n.kind, incoming, 0.0, masked))
            continue
        parts, absorbed = _propagate(n, rule, tape, r)
        outgoing = 0.0
        for src, part in zip(n.inputs, parts):
            R[src] = R[src] + part
            outgoing += float(part.sum())
        ledger.append(NodeLedger(n.id, n.kind, incoming, outgoing, absorbed + masked))
    ledger.reverse()
    return RelevanceTape(graph, R, conservation_report(ledger, seed_total, input_total))
