"""Feature-map perturbation benchmark.

Channels of a layer are ranked by an attribution method, then deleted
(zeroed) or inserted most-relevant-first while the explained logit is
recorded.  Faithful rankings make the logit fall fast on deletion (large
AOC) and rise fast on insertion (large AUC).
"""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .graph import (ForwardTape, Graph, TargetSpec, forward, forward_from, infer_shapes, select_scalar, target_mask,
                    vjp)
from .lrp import RuleAssignment, lrp_backward
from .tensor import ChannelVector

log = logging.getLogger(__name__)

METHODS = ("lrp", "gradient", "gradcam", "activation", "random")
MAX_STEPS = 32


@dataclass(frozen=True)
class ScoreMethod:
    name: str
    seed: int = 0  # used by "random" only
    assignment: RuleAssignment | None = None  # used by "lrp" only

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"unknown method {self.name!r}; valid methods: {', '.join(METHODS)}")


def parse_methods(text: str, seed: int = 0, assignment=None) -> list[ScoreMethod]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    if not names:
        raise ValueError(f"no methods given; valid methods: {', '.join(METHODS)}")
    return [ScoreMethod(n, seed, assignment) for n in names]


def _random_scores(n_channels: int, seed: int, stream=()) -> np.ndarray:
    rng = np.random.default_rng([seed, *stream])
    return rng.permutation(n_channels).astype(np.float64)


def channel_scores(tape: ForwardTape, layer_id: str, target: TargetSpec, method: ScoreMethod, *,
                   stream=(), _cache: dict | None = None) -> ChannelVector:
    """Per-channel importance of ``layer_id`` for ``target``.

    ``stream`` extends the random seed (e.g. by sample index) so that each
    sample gets its own permutation while staying reproducible.
    """
    if layer_id not in tape.values:
        raise KeyError(f"unknown layer {layer_id!r}")
    A = tape.values[layer_id]
    if A.shape[0] != 1:
        raise ValueError("channel scores need a batch-1 tape")
    cache = {} if _cache is None else _cache
    name = method.name
    if name == "activation":
        v = A[0].sum(axis=(1, 2))
    elif name == "random":
        v = _random_scores(A.shape[1], method.seed, stream)
    elif name == "lrp":
        key = ("lrp", id(method.assignment))
        if key not in cache:
            _, seed = select_scalar(tape, target)
            cache[key] = lrp_backward(tape, seed, method.assignment, head=target.head)
        v = cache[key].relevance[layer_id][0].sum(axis=(1, 2))
    else:
        if "grad" not in cache:
            cache["grad"] = vjp(tape, {target.head: target_mask(tape, target)})
        G = cache["grad"].nodes[layer_id][0]
        if name == "gradient":
            v = np.abs(G).sum(axis=(1, 2))
        else:  # gradcam
            v = G.mean(axis=(1, 2)) * A[0].mean(axis=(1, 2))
    return ChannelVector(np.asarray(v, dtype=np.float64), layer_id)


def ranking(scores) -> np.ndarray:
    """Channel indices by descending score; ties keep the lower index first."""
    values = scores.values if isinstance(scores, ChannelVector) else np.asarray(scores)
    return np.argsort(-values, kind="stable")


def step_groups(order, max_steps: int = MAX_STEPS) -> list[np.ndarray]:
    order = np.asarray(order)
    if len(order) <= 64:
        return [order[i:i + 1] for i in range(len(order))]
    return [g for g in np.array_split(order, max_steps)]


@dataclass
class PerturbCurve:
    values: np.ndarray  # f_0 .. f_T
    direction: str  # "deletion" or "insertion"
    groups: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.values) - 1


def _check_order(order, n_channels):
    order = np.asarray(order, dtype=int)
    if sorted(order.tolist()) != list(range(n_channels)):
        raise ValueError(f"ranking must be a permutation of {n_channels} channels")
    return order


def _curve(tape: ForwardTape, layer_id: str, target: TargetSpec, order, direction: str) -> PerturbCurve:
    A = tape.values[layer_id]
    order = _check_order(order, A.shape[1])
    groups = step_groups(order)
    keep = np.ones((len(groups) + 1, A.shape[1]))
    for t in range(1, len(groups) + 1):
        keep[t:, groups[t - 1]] = 0.0
    if direction == "insertion":
        keep = 1.0 - keep
    batch = A * keep[:, :, None, None]
    mask = target_mask(tape, target)
    out = forward_from(tape, layer_id, batch).values[target.head]
    return PerturbCurve((out * mask).sum(axis=(1, 2, 3)), direction, [g.tolist() for g in groups])


def deletion_curve(graph_or_tape, x, layer_id: str, target: TargetSpec, order) -> PerturbCurve:
    """Zero the ranked channel groups one step at a time; f_0 is the unperturbed logit."""
    tape = graph_or_tape if isinstance(graph_or_tape, ForwardTape) else forward(graph_or_tape, x)
    return _curve(tape, layer_id, target, order, "deletion")


def insertion_curve(graph_or_tape, x, layer_id: str, target: TargetSpec, order) -> PerturbCurve:
    """Start from all channels zeroed and restore ranked groups; f_0 is the fully ablated logit."""
    tape = graph_or_tape if isinstance(graph_or_tape, ForwardTape) else forward(graph_or_tape, x)
    return _curve(tape, layer_id, target, order, "insertion")


def aoc(curve: PerturbCurve) -> float:
    if curve.direction != "deletion":
        raise ValueError("AOC is defined for deletion curves")
    f = curve.values
    return float(np.mean(f[0] - f[1:]))


def auc(curve: PerturbCurve) -> float:
    if curve.direction != "insertion":
        raise ValueError("AUC is defined for insertion curves")
    f = curve.values
    return float(np.mean(f[1:] - f[0]))


# ---------------------------------------------------------------------------
# benchmark


def default_target(tape: ForwardTape, class_index: int | None = None, head: str | None = None) -> TargetSpec | None:
    """Target used by the benchmark and the CLI; None when nothing is predicted.

    Segmentation: ``class_index`` (default: flood) over its predicted region.
    Detection: the objectness logit at the most confident cell, or with
    ``head="classes"`` the class logit there (default: the argmax class).
    """
    graph = tape.graph
    if graph.meta.get("task", "segmentation") == "detection":
        head = head or "objectness"
        if head not in ("objectness", "classes"):
            raise ValueError(f"detection targets use the objectness or classes head, not {head!r}")
        obj = tape.values["objectness"][0, 0]
        r, c = np.unravel_index(int(obj.argmax()), obj.shape)
        if head == "objectness":
            return TargetSpec(head, "detection", 0, cell=(int(r), int(c)))
        k = int(tape.values[head][0, :, r, c].argmax()) if class_index is None else class_index
        return TargetSpec(head, "detection", k, cell=(int(r), int(c)))
    head = head or graph.outputs[0]
    k = 1 if class_index is None else class_index
    if not (tape.values[head][0].argmax(axis=0) == k).any():
        return None
    return TargetSpec(head, "segmentation", k)


def select_samples(graph: Graph, dataset, n: int, seed: int, class_index=None, batch: int = 16) -> list[int]:
    """``n`` dataset indices drawn by ``seed`` among images with a non-empty target, ascending."""
    if n > len(dataset):
        raise ValueError(f"requested {n} samples but the dataset has {len(dataset)}")
    eligible = []
    for start in range(0, len(dataset), batch):
        idx = list(range(start, min(start + batch, len(dataset))))
        tape = forward(graph, dataset.images(idx))
        for j, i in enumerate(idx):
            single = ForwardTape(graph, {k: v[j:j + 1] for k, v in tape.values.items()},
                                 {k: v[j:j + 1] for k, v in tape.gates.items()})
            if default_target(single, class_index) is not None:
                eligible.append(i)
    if n > len(eligible):
        raise ValueError(f"only {len(eligible)} samples have a non-empty target, {n} requested")
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(eligible, size=n, replace=False))


@dataclass
class SampleResult:
    sample: int
    rows: list  # (layer, method, direction, curve)


def evaluate_sample(graph: Graph, x, sample: int, layers, methods, class_index=None) -> SampleResult:
    tape = forward(graph, x)
    target = default_target(tape, class_index)
    if target is None:
        raise ValueError(f"sample {sample}: empty target")
    cache: dict = {}
    rows = []
    for li, layer in enumerate(layers):
        for m in methods:
            scores = channel_scores(tape, layer, target, m, stream=(sample, li), _cache=cache)
            order = ranking(scores)
            rows.append((layer, m.name, "deletion", _curve(tape, layer, target, order, "deletion")))
            rows.append((layer, m.name, "insertion", _curve(tape, layer, target, order, "insertion")))
    return SampleResult(sample, rows)


@dataclass
class BenchReport:
    samples: list[int]
    layers: list[str]
    methods: list[str]
    # (method, layer) -> per-sample AOC / AUC lists in sample order
    aoc: dict = field(default_factory=dict)
    auc: dict = field(default_factory=dict)
    curves: list = field(default_factory=list)  # (sample, layer, method, direction, values)
    config: dict = field(default_factory=dict)

    def mean_aoc(self, method: str, layer: str | None = None) -> float:
        if layer is not None:
            return float(np.mean(self.aoc[(method, layer)]))
        return float(np.mean([self.mean_aoc(method, l) for l in self.layers]))

    def mean_auc(self, method: str, layer: str | None = None) -> float:
        if layer is not None:
            return float(np.mean(self.auc[(method, layer)]))
        return float(np.mean([self.mean_auc(method, l) for l in self.layers]))

    def per_sample_aoc(self, method: str) -> np.ndarray:
        """AOC averaged over layers, one value per sample."""
        return np.mean([self.aoc[(method, l)] for l in self.layers], axis=0)

    def sign_test(self, a: str, b: str) -> dict:
        """One-sided paired sign test that method ``a`` has larger AOC than ``b``; ties dropped."""
        d = self.per_sample_aoc(a) - self.per_sample_aoc(b)
        pos, neg = int((d > 0).sum()), int((d < 0).sum())
        p = float(binomtest(pos, pos + neg, 0.5, alternative="greater").pvalue) if pos + neg else 1.0
        return {"a": a, "b": b, "wins": pos, "losses": neg, "ties": int(len(d) - pos - neg), "p_value": p}

    def to_dict(self) -> dict:
        rows = []
        for layer in self.layers:
            for m in self.methods:
                rows.append({"method": m, "layer": layer, "mean_aoc": self.mean_aoc(m, layer),
                             "mean_auc": self.mean_auc(m, layer), "n": len(self.aoc[(m, layer)])})
        d = {
            "config": self.config,
            "samples": self.samples,
            "layers": self.layers,
            "methods": self.methods,
            "results": rows,
            "layer_average": {m: {"aoc": self.mean_aoc(m), "auc": self.mean_auc(m)} for m in self.methods},
        }
        tests = [self.sign_test(m, "random") for m in self.methods if m != "random"] if "random" in self.methods else []
        if tests:
            d["sign_tests"] = tests
        return d

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "layer", "method", "direction", "step", "logit"])
        for sample, layer, method, direction, values in self.curves:
            for t, f in enumerate(values):
                w.writerow([sample, layer, method, direction, t, repr(float(f))])
        return buf.getvalue()


def run_benchmark(dataset, graph: Graph, layers, methods, n: int, seed: int = 0, sample_seed: int = 0,
                  class_index=None, jobs: int = 1, samples=None) -> BenchReport:
    """Run the deletion/insertion protocol.

    ``seed`` drives the Random method only; ``sample_seed`` drives which
    samples are evaluated, so changing ``seed`` changes nothing but the
    Random rows.  ``samples`` overrides selection with explicit indices.
    """
    layers = list(layers)
    if not layers:
        raise ValueError("layer list is empty")
    for layer in layers:
        if layer not in graph:
            raise KeyError(f"unknown layer {layer!r}")
    methods = [m if isinstance(m, ScoreMethod) else ScoreMethod(m, seed) for m in methods]
    if not methods:
        raise ValueError("method list is empty")
    if samples is None:
        samples = select_samples(graph, dataset, n, sample_seed, class_index)
    samples = [int(s) for s in samples]

    def work(i):
        return evaluate_sample(graph, dataset.image(i), i, layers, methods, class_index)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, samples))
    else:
        results = [work(i) for i in samples]

    names = [m.name for m in methods]
    report = BenchReport(samples, layers, names)
    for key in [(m, l) for m in names for l in layers]:
        report.aoc[key] = []
        report.auc[key] = []
    # results are in sample order regardless of completion order
    for res in results:
        for layer, m, direction, curve in res.rows:
            if direction == "deletion":
                report.aoc[(m, layer)].append(aoc(curve))
            else:
                report.auc[(m, layer)].append(auc(curve))
            report.curves.append((res.sample, layer, m, direction, curve.values))
    report.config = {"layers": layers, "methods": names, "n": len(samples), "seed": seed,
                     "sample_seed": sample_seed, "class_index": class_index,
                     "step": "1 channel" if all(graph_channels(graph, l) <= 64 for l in layers) else f"{MAX_STEPS} groups",
                     "ablation": "zero"}
    return report


def graph_channels(graph: Graph, layer_id: str) -> int:
    shapes, _ = infer_shapes(graph)
    return shapes[layer_id][1]
