"""Toy segmentation and detection models in the graph IR.

``toy-pid`` is a three-branch segmentation net at desk scale: a detail
(P) branch, a low-resolution context (I) branch and a boundary (D) branch,
merged by two sigmoid-gated fusions::

    fused = P + I * sigmoid(g),   g = conv1x1(concat(P, I))
    out   = fused * (1 - sigmoid(d))

``toy-det`` is an anchor-free single-scale detector on an 8x8 grid with
separate objectness, class and box heads.

Both come with ``handcrafted`` weights (closed form, documented below),
``random`` weights (He-normal, seeded) for training and fuzzing.

Handcrafted toy-pid
    stem1 computes three colour features from a 2x2 average, ReLU'd:
    water = B - G - 0.15, vegetation = G - B - 0.15 and brightness =
    R + G + B - 1.4.  Stride-2 convs average a 2x2 tap block so that grid
    index i is centred on input pixel 4i + 1.5, which lines up with the
    half-pixel (align_corners=False) upsampling at the end.  Later stride-1
    convs copy the features through their centre tap.  The gates are
    constant: sigmoid(-2) on the context branch and 1 - sigmoid(0) = 0.5 on
    the boundary gate.  The classifier scores flood = 8 water, road =
    8 brightness and background = 8 vegetation + 0.05, so pixels showing
    none of the features default to background.

Handcrafted toy-det
    c1 (2x2, stride 2) averages per-pixel colour features: white =
    R+G+B-2.5, dark = 0.55-(R+G+B), red = R-G-B-0.2, bright-red = R-0.7,
    bright-green = G-0.7.  c2 and c3 are 2x2 stride-2 averages, so one grid
    cell sees exactly one 8x8 pixel block.  Objectness is a positive
    combination of the five features; class logits read white/dark/red.
    Ground colours (vegetation, water, road) trigger none of the features.
"""
from __future__ import annotations

import numpy as np

from ..graph import Graph, Node, check

PID_CLASSES = 3
DET_CLASSES = 3  # white, dark, red


class Builder:
    def __init__(self, rng=None, bias=True):
        self.nodes: list[Node] = []
        self.rng = rng
        self.bias = bias

    def add(self, nid, kind, inputs=(), params=None, weights=None):
        self.nodes.append(Node(nid, kind, list(inputs), dict(params or {}), dict(weights or {})))
        return nid

    def conv(self, nid, src, c_in, c_out, k, stride=1, padding=0, weight=None, bias=None):
        if weight is None:
            std = np.sqrt(2.0 / (c_in * k * k))
            weight = self.rng.standard_normal((c_out, c_in, k, k)) * std
        ws = {"weight": np.asarray(weight, dtype=np.float64)}
        if self.bias:
            ws["bias"] = np.zeros(c_out) if bias is None else np.asarray(bias, dtype=np.float64)
        return self.add(nid, "Conv2D", [src], {"stride": stride, "padding": padding}, ws)


def _center_identity(c_out, c_in, k, channels):
    w = np.zeros((c_out, c_in, k, k))
    for ch in channels:
        w[ch, ch, k // 2, k // 2] = 1.0
    return w


def _quad_identity(c_out, c_in, channels):
    # 3x3 kernel averaging the lower-right 2x2 taps
    w = np.zeros((c_out, c_in, 3, 3))
    for ch in channels:
        w[ch, ch, 1:, 1:] = 0.25
    return w


def _avg_identity(c, k):
    w = np.zeros((c, c, k, k))
    for ch in range(c):
        w[ch, ch] = 1.0 / (k * k)
    return w


def build_toy_pid(weights: str = "random", seed: int = 0, size: int = 64, width: int = 16,
                  bias: bool = True, classes: int = PID_CLASSES) -> Graph:
    """Build the toy PID-style segmentation graph.

    ``weights`` is ``"handcrafted"`` or ``"random"``; ``bias=False`` drops
    every bias term (used by conservation checks).
    """
    if weights not in ("handcrafted", "random"):
        raise ValueError(f"unknown weight mode {weights!r}")
    hand = weights == "handcrafted"
    if hand and (width != 16 or classes != PID_CLASSES or size % 16):
        raise ValueError("handcrafted toy-pid needs width=16, 3 classes and size divisible by 16")
    b = Builder(np.random.default_rng(seed), bias)
    w1 = width // 2
    h4 = size // 4
    feats = (0, 1, 2)

    def hw(weight):
        return weight if hand else None

    stem1_w = stem1_b = None
    if hand:
        taps = np.zeros((3, 3))
        taps[1:, 1:] = 0.25
        stem1_w = np.zeros((w1, 3, 3, 3))
        stem1_w[0, 2], stem1_w[0, 1] = taps, -taps
        stem1_w[1, 1], stem1_w[1, 2] = taps, -taps
        stem1_w[2] = taps
        stem1_b = np.zeros(w1)
        stem1_b[:3] = [-0.15, -0.15, -1.4]

    b.add("image", "Input", params={"shape": [1, 3, size, size]})
    b.conv("stem1", "image", 3, w1, 3, 2, 1, stem1_w, stem1_b)
    b.add("stem1_relu", "ReLU", ["stem1"])
    b.conv("stem2", "stem1_relu", w1, width, 3, 2, 1, hw(_quad_identity(width, w1, feats)))
    b.add("stem2_relu", "ReLU", ["stem2"])
    # P branch
    b.conv("p_conv", "stem2_relu", width, width, 3, 1, 1, hw(_center_identity(width, width, 3, feats)))
    b.add("p_relu", "ReLU", ["p_conv"])
    # I branch
    b.conv("i_conv1", "stem2_relu", width, width, 3, 2, 1, hw(_quad_identity(width, width, feats)))
    b.add("i_relu1", "ReLU", ["i_conv1"])
    b.conv("i_conv2", "i_relu1", width, width, 3, 1, 1, hw(_center_identity(width, width, 3, feats)))
    b.add("i_relu2", "ReLU", ["i_conv2"])
    b.add("i_up", "BilinearResize", ["i_relu2"], {"out_h": h4, "out_w": h4, "align_corners": False})
    b.conv("i_proj", "i_up", width, width, 1, 1, 0, hw(_center_identity(width, width, 1, feats)))
    # D branch
    b.conv("d_conv1", "stem2_relu", width, w1, 3, 1, 1, hw(np.zeros((w1, width, 3, 3))))
    b.add("d_relu", "ReLU", ["d_conv1"])
    b.conv("d_conv2", "d_relu", w1, width, 1, 1, 0, hw(np.zeros((width, w1, 1, 1))))
    # pixel-attention fusion: fused = P + I * sigmoid(g)
    b.add("pi_cat", "ConcatC", ["p_relu", "i_proj"])
    b.conv("pag_gate", "pi_cat", 2 * width, width, 1, 1, 0, hw(np.zeros((width, 2 * width, 1, 1))),
           np.full(width, -2.0) if hand else None)
    b.add("pag_mul", "GatedMul", ["i_proj", "pag_gate"], {"gate_mode": "sigmoid"})
    b.add("fused", "Add", ["p_relu", "pag_mul"])
    # boundary-attention fusion: out = fused * (1 - sigmoid(d))
    b.add("bag", "GatedMul", ["fused", "d_conv2"], {"gate_mode": "one_minus_sigmoid"})
    # head
    b.conv("head1", "bag", width, width, 3, 1, 1, hw(_center_identity(width, width, 3, feats)))
    b.add("head1_relu", "ReLU", ["head1"])
    b.conv("head2", "head1_relu", width, width, 3, 1, 1, hw(_center_identity(width, width, 3, feats)))
    b.add("head2_relu", "ReLU", ["head2"])
    cls_w = cls_b = None
    if hand:
        cls_w = np.zeros((classes, width, 1, 1))
        cls_w[1, 0] = 8.0  # flood <- water
        cls_w[0, 1] = 8.0  # background <- vegetation
        cls_w[2, 2] = 8.0  # road <- brightness
        cls_b = np.array([0.05, 0.0, 0.0])
    b.conv("classifier", "head2_relu", width, classes, 1, 1, 0, cls_w, cls_b)
    b.add("upsample", "BilinearResize", ["classifier"], {"out_h": size, "out_w": size, "align_corners": False})
    b.add("logits", "Output", ["upsample"])
    meta = {"arch": "toy-pid", "weights": weights, "seed": seed, "task": "segmentation",
            "classes": ["background", "flood", "road"][:classes], "concept_layers": ["head1", "head2"]}
    return check(Graph(b.nodes, {"image": (1, 3, size, size)}, ["logits"], meta))


def build_toy_detector(weights: str = "random", seed: int = 0, size: int = 64, width: int = 8,
                       bias: bool = True) -> Graph:
    """Build the toy single-scale detector (heads: objectness, classes, boxes)."""
    if weights not in ("handcrafted", "random"):
        raise ValueError(f"unknown weight mode {weights!r}")
    hand = weights == "handcrafted"
    if hand and (width != 8 or size % 8):
        raise ValueError("handcrafted toy-det needs width=8 and size divisible by 8")
    b = Builder(np.random.default_rng(seed), bias)

    c1_w = c1_b = obj_w = obj_b = cls_w = cls_b = None
    box_w = box_b = None
    if hand:
        c1_w = np.zeros((width, 3, 2, 2))
        c1_w[0] = 0.25                      # white: R+G+B-2.5
        c1_w[1] = -0.25                     # dark: 0.55-(R+G+B)
        c1_w[2, 0], c1_w[2, 1:] = 0.25, -0.25  # red: R-G-B-0.2
        c1_w[3, 0] = 0.25                   # bright red channel: R-0.7
        c1_w[4, 1] = 0.25                   # bright green channel: G-0.7
        c1_b = np.zeros(width)
        c1_b[:5] = [-2.5, 0.55, -0.2, -0.7, -0.7]
        obj_w = np.zeros((1, width, 1, 1))
        obj_w[0, :5, 0, 0] = [8.0, 12.0, 6.0, 8.0, 8.0]
        obj_b = np.array([-1.0])
        cls_w = np.zeros((DET_CLASSES, width, 1, 1))
        for k in range(DET_CLASSES):
            cls_w[k, k] = 10.0
        cls_b = np.zeros(DET_CLASSES)
        box_w = np.zeros((4, width, 1, 1))
        box_b = np.array([0.0, 0.0, 1.0, 1.0])

    b.add("image", "Input", params={"shape": [1, 3, size, size]})
    b.conv("c1", "image", 3, width, 2, 2, 0, c1_w, c1_b)
    b.add("c1_relu", "ReLU", ["c1"])
    b.conv("c2", "c1_relu", width, width, 2, 2, 0, _avg_identity(width, 2) if hand else None)
    b.add("c2_relu", "ReLU", ["c2"])
    b.conv("c3", "c2_relu", width, width, 2, 2, 0, _avg_identity(width, 2) if hand else None)
    b.add("c3_relu", "ReLU", ["c3"])
    b.conv("obj_conv", "c3_relu", width, 1, 1, 1, 0, obj_w, obj_b)
    b.add("objectness", "Output", ["obj_conv"])
    b.conv("cls_conv", "c3_relu", width, DET_CLASSES, 1, 1, 0, cls_w, cls_b)
    b.add("classes", "Output", ["cls_conv"])
    b.conv("box_conv", "c3_relu", width, 4, 1, 1, 0, box_w, box_b)
    b.add("boxes", "Output", ["box_conv"])
    meta = {"arch": "toy-det", "weights": weights, "seed": seed, "task": "detection",
            "classes": ["white", "dark", "red"], "grid": size // 8, "cell": 8,
            "explainable_heads": ["objectness", "classes"], "concept_layers": ["c3", "c2"]}
    return check(Graph(b.nodes, {"image": (1, 3, size, size)}, ["objectness", "classes", "boxes"], meta))


def build_model(arch: str, weights: str = "random", seed: int = 0, **kw) -> Graph:
    if arch == "toy-pid":
        return build_toy_pid(weights, seed, **kw)
    if arch == "toy-det":
        return build_toy_detector(weights, seed, **kw)
    raise ValueError(f"unknown architecture {arch!r}; expected toy-pid or toy-det")
