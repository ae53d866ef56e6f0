"""Minimal mini-batch gradient descent for the toy models."""
from __future__ import annotations

import copy
import logging

import numpy as np

from ..graph import Graph, forward, vjp
from .scenes import CAR_CLASSES

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def _softmax(z, axis=1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def segmentation_loss(logits, masks):
    """Mean per-pixel softmax cross-entropy and its gradient w.r.t. the logits."""
    n, c, h, w = logits.shape
    onehot = np.eye(c)[masks].transpose(0, 3, 1, 2)
    p = _softmax(logits)
    loss = -np.sum(onehot * np.log(np.clip(p, 1e-300, None))) / (n * h * w)
    return float(loss), (p - onehot) / (n * h * w)


def detection_targets(boxes_per_image, grid: int, cell: int):
    """Objectness map (n, 1, g, g) and class map (n, g, g) with -1 off positives.

    A cell is positive when it holds the centre of a box.
    """
    n = len(boxes_per_image)
    obj = np.zeros((n, 1, grid, grid))
    cls = -np.ones((n, grid, grid), dtype=int)
    for i, boxes in enumerate(boxes_per_image):
        for b in boxes:
            x0, y0, x1, y1 = b["box"]
            r = min(int((y0 + y1) / 2 // cell), grid - 1)
            c = min(int((x0 + x1) / 2 // cell), grid - 1)
            obj[i, 0, r, c] = 1.0
            if b["color"] in CAR_CLASSES:
                cls[i, r, c] = CAR_CLASSES.index(b["color"])
    return obj, cls


def detection_loss(obj_logits, cls_logits, obj_target, cls_target):
    """Per-cell logistic objectness loss plus class cross-entropy on positive cells."""
    cells = obj_logits.size
    p = 1.0 / (1.0 + np.exp(-obj_logits))
    obj_loss = np.sum(np.logaddexp(0.0, obj_logits) - obj_target * obj_logits) / cells
    g_obj = (p - obj_target) / cells
    pos = cls_target >= 0
    g_cls = np.zeros_like(cls_logits)
    cls_loss = 0.0
    n_pos = int(pos.sum())
    if n_pos:
        probs = _softmax(cls_logits)
        k = cls_logits.shape[1]
        onehot = np.zeros_like(cls_logits)
        idx = np.nonzero(pos)
        onehot[idx[0], cls_target[pos], idx[1], idx[2]] = 1.0
        posmask = pos[:, None].repeat(k, axis=1)
        cls_loss = -np.sum(onehot * np.log(np.clip(probs, 1e-300, None))) / n_pos
        g_cls = np.where(posmask, probs - onehot, 0.0) / n_pos
    return float(obj_loss + cls_loss), g_obj, g_cls


def evaluate_pixel_accuracy(graph: Graph, dataset, indices=None, batch: int = 16) -> float:
    indices = list(range(len(dataset))) if indices is None else list(indices)
    correct = total = 0
    for start in range(0, len(indices), batch):
        idx = indices[start:start + batch]
        x = dataset.images(idx)
        pred = forward(graph, x).values[graph.outputs[0]].argmax(axis=1)
        masks = np.stack([dataset.mask(i) for i in idx])
        correct += int((pred == masks).sum())
        total += masks.size
    return correct / total


def train_sgd(graph: Graph, dataset, epochs: int, lr: float, seed: int, batch_size: int = 16):
    """Train a copy of ``graph`` and return ``(trained_graph, loss_history)``.

    Segmentation graphs (one head) use per-pixel cross-entropy; detection
    graphs use the objectness/class heads.  Batches are drawn from a seeded
    permutation per epoch, so the result is deterministic.
    """
    model = copy.deepcopy(graph)
    history: list[float] = []
    if epochs == 0:
        return model, history
    task = model.meta.get("task", "segmentation")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    images = dataset.images(range(n))
    if task == "segmentation":
        masks = np.stack([dataset.mask(i) for i in range(n)]).astype(int)
    else:
        grid, cell = int(model.meta["grid"]), int(model.meta["cell"])
        obj_t, cls_t = detection_targets([dataset.boxes(i) for i in range(n)], grid, cell)
    params = [(node, name) for node in model.nodes for name in sorted(node.weights)]
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tape = forward(model, images[idx])
            if task == "segmentation":
                loss, g = segmentation_loss(tape.values[model.outputs[0]], masks[idx])
                seeds = {model.outputs[0]: g}
            else:
                loss, g_obj, g_cls = detection_loss(tape.values["objectness"], tape.values["classes"], obj_t[idx], cls_t[idx])
                seeds = {"objectness": g_obj, "classes": g_cls}
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}", history)
            grads = vjp(tape, seeds).weights
            for node, name in params:
                gw = grads.get((node.id, name))
                if gw is not None:
                    node.weights[name] = node.weights[name] - lr * gw
            total += loss * len(idx)
        history.append(total / n)
        log.info("epoch %d loss %.6f", epoch, history[-1])
    model.meta = {**model.meta, "weights": "trained", "train": {"epochs": epochs, "lr": lr, "seed": seed, "batch_size": batch_size}}
    return model, history
