"""Concept-level relevance: per-channel relevance vectors, channel-conditioned
heatmaps, reference-sample retrieval and heatmap rendering."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .graph import ForwardTape
from .lrp import RelevanceTape, RuleAssignment, lrp_backward
from .tensor import spatial_sum


@dataclass
class ConceptVector:
    values: np.ndarray
    layer_id: str
    sample_id: str | None = None
    target: dict | None = None
    # per-channel (row, col) of the largest relevance, in layer coordinates
    peaks: np.ndarray | None = None
    layer_hw: tuple[int, int] | None = None

    def __len__(self) -> int:
        return len(self.values)

    def to_dict(self) -> dict:
        d = {"layer": self.layer_id, "sample": self.sample_id, "values": [float(v) for v in self.values]}
        if self.target is not None:
            d["target"] = self.target
        return d


def concept_vector(rtape: RelevanceTape, layer_id: str, sample_id=None, target=None) -> ConceptVector:
    """Sum the relevance of ``layer_id`` over space, one value per channel."""
    if layer_id not in rtape.relevance:
        raise KeyError(f"unknown layer {layer_id!r}")
    R = rtape.relevance[layer_id]
    values = spatial_sum(R, layer_id).values
    flat = R[0].reshape(R.shape[1], -1).argmax(axis=1)
    peaks = np.stack(np.unravel_index(flat, R.shape[2:]), axis=1)
    return ConceptVector(values, layer_id, sample_id, target, peaks, tuple(R.shape[2:]))


def input_heatmap(rtape: RelevanceTape, input_id: str | None = None) -> np.ndarray:
    """Input relevance summed over colour channels, shape (h, w)."""
    return rtape.input_relevance(input_id)[0].sum(axis=0)


def conditional_relevance(tape: ForwardTape, layer_id: str, channels, seed, assignment: RuleAssignment | None = None,
                          head: str | None = None, base: RelevanceTape | None = None) -> RelevanceTape:
    """Relevance pass restricted to the concepts ``channels`` of ``layer_id``.

    The pass runs normally down to the layer; there, relevance outside the
    channel set is dropped, and only the kept part continues to the input.
    Relevance that bypasses the layer is not part of any concept.
    ``base`` reuses an already computed unconditional pass.
    """
    if layer_id not in tape.values:
        raise KeyError(f"unknown layer {layer_id!r}")
    n_ch = tape.values[layer_id].shape[1]
    channels = sorted({int(c) for c in channels})
    if not channels:
        raise ValueError("channel set must not be empty")
    if channels[0] < 0 or channels[-1] >= n_ch:
        raise ValueError(f"channel index out of range for {n_ch} channels: {channels}")
    if base is None:
        base = lrp_backward(tape, seed, assignment, head=head)
    keep = np.zeros(n_ch, dtype=bool)
    keep[channels] = True
    R = base.relevance[layer_id] * keep[None, :, None, None]
    return lrp_backward(tape, assignment=assignment, seeds={layer_id: R})


def conditional_heatmap(tape: ForwardTape, layer_id: str, channels, seed, assignment: RuleAssignment | None = None,
                        head: str | None = None, base: RelevanceTape | None = None) -> np.ndarray:
    """Input-space heatmap (h, w) of the concepts ``channels`` at ``layer_id``."""
    return input_heatmap(conditional_relevance(tape, layer_id, channels, seed, assignment, head, base))


@dataclass
class Reference:
    sample_id: str
    value: float
    location: tuple[int, int]
    crop: tuple[int, int, int, int]  # y0, x0, y1, x1 in input pixels


@dataclass
class ReferenceSet:
    layer_id: str
    channel: int
    entries: list[Reference] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "layer": self.layer_id,
            "channel": self.channel,
            "references": [
                {"sample": e.sample_id, "value": e.value, "location": list(e.location), "crop": list(e.crop)}
                for e in self.entries
            ],
        }


def crop_window(location, layer_hw, input_hw, size: int = 16) -> tuple[int, int, int, int]:
    """A ``size`` x ``size`` input window centred on a layer position, clamped to the image."""
    box = []
    for loc, n_layer, n_in in zip(location, layer_hw, input_hw):
        centre = (loc + 0.5) * n_in / n_layer
        side = min(size, n_in)
        lo = int(round(centre - side / 2))
        lo = min(max(lo, 0), n_in - side)
        box.append((lo, lo + side))
    (y0, y1), (x0, x1) = box
    return y0, x0, y1, x1


def relmax_references(vectors, channel: int, k: int = 8, input_hw=(64, 64), crop: int = 16) -> ReferenceSet:
    """Top-``k`` samples by relevance of one concept; ties go to the smaller sample id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    vectors = list(vectors)
    if not vectors:
        raise ValueError("no concept vectors")
    layer = vectors[0].layer_id
    ranked = sorted(vectors, key=lambda v: (-float(v.values[channel]), v.sample_id))
    out = ReferenceSet(layer, int(channel))
    for v in ranked[:k]:
        loc = (0, 0) if v.peaks is None else tuple(int(i) for i in v.peaks[channel])
        hw = v.layer_hw or input_hw
        out.entries.append(Reference(v.sample_id, float(v.values[channel]), loc, crop_window(loc, hw, input_hw, crop)))
    return out


NEUTRAL = np.array([255, 255, 255], dtype=np.float64)
WARM = np.array([178, 24, 43], dtype=np.float64)
COLD = np.array([33, 102, 172], dtype=np.float64)


def heatmap_rgb(relevance) -> np.ndarray:
    """Map a 2-D relevance array to uint8 RGB with symmetric normalisation.

    Zero maps to white, +max|R| to dark red, -max|R| to dark blue.
    """
    r = np.asarray(relevance, dtype=np.float64)
    if r.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {r.shape}")
    top = np.abs(r).max()
    t = r / top if top > 0 else np.zeros_like(r)
    pos = np.clip(t, 0.0, 1.0)[..., None]
    neg = np.clip(-t, 0.0, 1.0)[..., None]
    rgb = NEUTRAL + pos * (WARM - NEUTRAL) + neg * (COLD - NEUTRAL)
    return np.round(rgb).astype(np.uint8)


def render_heatmap(relevance, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(heatmap_rgb(relevance)).save(path, format="PNG")
    return path
