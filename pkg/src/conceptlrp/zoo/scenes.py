"""Seeded synthetic aerial flood scenes with cars.

Each image is a square RGB scene with a vegetation background, smooth flood
blobs, at most one road band and a few axis-aligned car rectangles.  The
class mask labels ground cover only (cars take the class of what is under
them); cars are reported separately as boxes with a colour label.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

CLASSES = {0: "background", 1: "flood", 2: "road"}

GROUND_RGB = {
    0: (0.30, 0.50, 0.22),
    1: (0.22, 0.35, 0.68),
    2: (0.52, 0.52, 0.50),
}

CAR_RGB = {
    "white": (0.93, 0.93, 0.93),
    "dark": (0.12, 0.12, 0.14),
    "red": (0.85, 0.12, 0.10),
    # never used by the default palette; for out-of-distribution tests
    "yellow": (0.92, 0.85, 0.15),
}

CAR_CLASSES = ("white", "dark", "red")


@dataclass
class SceneConfig:
    size: int = 64
    flood_fraction: tuple[float, float] = (0.15, 0.45)
    flood_smoothness: float = 5.0
    road_prob: float = 0.8
    road_width: tuple[int, int] = (6, 12)
    cars: tuple[int, int] = (0, 3)
    car_size: tuple[int, int] = (8, 14)
    car_colors: tuple[str, ...] = CAR_CLASSES
    noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        self.flood_fraction = tuple(float(v) for v in self.flood_fraction)
        self.road_width = tuple(int(v) for v in self.road_width)
        self.cars = tuple(int(v) for v in self.cars)
        self.car_size = tuple(int(v) for v in self.car_size)
        self.car_colors = tuple(self.car_colors)
        lo, hi = self.flood_fraction
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("flood_fraction must satisfy 0 < lo <= hi < 1")
        if not 0.0 <= self.road_prob <= 1.0:
            raise ValueError("road_prob must lie in [0, 1]")
        if self.cars[0] < 0 or self.cars[0] > self.cars[1]:
            raise ValueError("cars must be a non-negative (min, max) range")
        if self.car_size[0] < 1 or self.car_size[1] >= self.size:
            raise ValueError("car_size does not fit the image")
        unknown = set(self.car_colors) - set(CAR_RGB)
        if unknown:
            raise ValueError(f"unknown car colours {sorted(unknown)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Scene:
    image: np.ndarray  # (h, w, 3) uint8
    mask: np.ndarray  # (h, w) uint8 class indices
    boxes: list[dict] = field(default_factory=list)


def make_scene(config: SceneConfig, index: int, seed: int | None = None) -> Scene:
    """Render scene ``index``; the result depends only on (config, seed, index)."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng([seed, index])
    s = config.size
    mask = np.zeros((s, s), dtype=np.uint8)

    frac = rng.uniform(*config.flood_fraction)
    field_ = gaussian_filter(rng.standard_normal((s, s)), config.flood_smoothness, mode="wrap")
    mask[field_ > np.quantile(field_, 1.0 - frac)] = 1

    if rng.random() < config.road_prob:
        width = int(rng.integers(config.road_width[0], config.road_width[1] + 1))
        start = int(rng.integers(0, s - width + 1))
        if rng.random() < 0.5:
            mask[start:start + width, :] = 2
        else:
            mask[:, start:start + width] = 2

    rgb = np.array([GROUND_RGB[c] for c in range(3)])[mask]
    boxes = []
    n_cars = int(rng.integers(config.cars[0], config.cars[1] + 1))
    occupied = np.zeros((s, s), dtype=bool)
    for _ in range(n_cars):
        color = config.car_colors[int(rng.integers(len(config.car_colors)))]
        for _attempt in range(20):
            h = int(rng.integers(config.car_size[0], config.car_size[1] + 1))
            w = int(rng.integers(config.car_size[0], config.car_size[1] + 1))
            y0 = int(rng.integers(0, s - h + 1))
            x0 = int(rng.integers(0, s - w + 1))
            if not occupied[y0:y0 + h, x0:x0 + w].any():
                break
        else:
            continue
        occupied[y0:y0 + h, x0:x0 + w] = True
        rgb[y0:y0 + h, x0:x0 + w] = CAR_RGB[color]
        boxes.append({"box": [x0, y0, x0 + w, y0 + h], "color": color})

    rgb = rgb + config.noise * rng.standard_normal(rgb.shape)
    image = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    return Scene(image, mask, boxes)


def _save_png(array: np.ndarray, path: Path):
    Image.fromarray(array).save(path, format="PNG")


def gen_dataset(config: SceneConfig, n: int, seed: int, out_dir, jobs: int = 1) -> dict:
    """Write ``n`` scenes under ``out_dir`` and return the manifest.

    Layout: ``images/NNNN.png``, ``masks/NNNN.png``, ``boxes.json``,
    ``manifest.json``.  Output is byte-identical for equal arguments,
    whatever ``jobs`` is.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    config = SceneConfig(**{**config.to_dict(), "seed": seed})

    def work(i):
        scene = make_scene(config, i, seed)
        name = f"{i:04d}"
        _save_png(scene.image, out / "images" / f"{name}.png")
        _save_png(scene.mask, out / "masks" / f"{name}.png")
        return name, scene.boxes

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(work, range(n)))
    else:
        results = [work(i) for i in range(n)]
    boxes = {name: b for name, b in results}
    (out / "boxes.json").write_text(json.dumps(boxes, indent=1, sort_keys=True) + "\n")
    manifest = {
        "n": n,
        "seed": seed,
        "config": config.to_dict(),
        "classes": {str(k): v for k, v in CLASSES.items()},
        "samples": [name for name, _ in results],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


class Dataset:
    """Read access to a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = json.loads((self.root / "manifest.json").read_text())
        self.ids = list(self.manifest["samples"])
        self._boxes = json.loads((self.root / "boxes.json").read_text())

    def __len__(self) -> int:
        return len(self.ids)

    def image(self, i: int) -> np.ndarray:
        """Sample ``i`` as a (1, 3, h, w) float64 tensor in [0, 1]."""
        arr = np.asarray(Image.open(self.root / "images" / f"{self.ids[i]}.png").convert("RGB"))
        return arr.transpose(2, 0, 1)[None].astype(np.float64) / 255.0

    def mask(self, i: int) -> np.ndarray:
        return np.asarray(Image.open(self.root / "masks" / f"{self.ids[i]}.png"))

    def boxes(self, i: int) -> list[dict]:
        return self._boxes[self.ids[i]]

    def images(self, indices) -> np.ndarray:
        return np.concatenate([self.image(i) for i in indices], axis=0)


def scene_tensor(scene: Scene) -> np.ndarray:
    return scene.image.transpose(2, 0, 1)[None].astype(np.float64) / 255.0
