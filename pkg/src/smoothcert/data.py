"""Procedural shape datasets and deterministic batching."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import rten

SHAPE_FAMILIES = ("disc", "rectangle", "cross", "stripes", "checker", "ring", "triangle", "diagonal")

DEFAULT_SPLITS = {"train": 0.6, "val": 0.2, "test": 0.2}


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    splits: np.ndarray  # (N,) split tag per example
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=object)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be (N, C, H, W) with one label each")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def split(self, name: str) -> "Dataset":
        idx = np.flatnonzero(self.splits == name)
        return self.subset(idx)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.splits[idx], self.seed, dict(self.meta))

    def split_sizes(self) -> dict[str, int]:
        names, counts = np.unique(self.splits.astype(str), return_counts=True)
        return {str(n): int(c) for n, c in zip(names, counts)}

    def manifest(self) -> dict:
        return {"seed": self.seed, "k": self.num_classes, **self.meta, "split_sizes": self.split_sizes()}

    def save(self, path) -> None:
        """RTEN payload plus ``<path>.json`` manifest."""
        tags = sorted(set(self.splits.astype(str)))
        codes = np.array([tags.index(s) for s in self.splits.astype(str)], dtype=np.uint32)
        rten.write_rten(path, [("images", self.images), ("labels", self.labels.astype(np.uint32)), ("splits", codes)])
        man = self.manifest()
        man["split_tags"] = tags
        Path(str(path) + ".json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        rec = rten.read_rten(path)
        man = json.loads(Path(str(path) + ".json").read_text())
        tags = man["split_tags"]
        splits = np.array([tags[i] for i in rec["splits"]], dtype=object)
        meta = {k: man[k] for k in ("n", "size") if k in man}
        return cls(rec["images"], rec["labels"].astype(np.int64), man["k"], splits, man.get("seed"), meta)


def _soft(sdf: np.ndarray, sharp: float = 12.0) -> np.ndarray:
    # sdf < 0 inside
    return 1.0 / (1.0 + np.exp(np.clip(sharp * sdf, -50, 50)))


def _shape_mask(family: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.hypot(u, v)
    if family == "disc":
        return _soft(r - 0.55)
    if family == "rectangle":
        return _soft(np.maximum(np.abs(u) - 0.6, np.abs(v) - 0.35))
    if family == "cross":
        bar1 = np.maximum(np.abs(u) - 0.7, np.abs(v) - 0.18)
        bar2 = np.maximum(np.abs(v) - 0.7, np.abs(u) - 0.18)
        return _soft(np.minimum(bar1, bar2))
    if family == "stripes":
        return 0.5 + 0.5 * np.tanh(3.0 * np.sin(2.5 * np.pi * v)) * _soft(r - 0.85)
    if family == "checker":
        return (0.5 + 0.5 * np.tanh(3.0 * np.sin(2.0 * np.pi * u) * np.sin(2.0 * np.pi * v))) * _soft(r - 0.85)
    if family == "ring":
        return _soft(np.abs(r - 0.5) - 0.14)
    if family == "triangle":
        # equilateral, pointing up
        d = np.maximum.reduce([-v - 0.35, 0.866 * u + 0.5 * v - 0.3, -0.866 * u + 0.5 * v - 0.3])
        return _soft(d)
    if family == "diagonal":
        return _soft(np.minimum(np.abs(u - v), np.abs(u + v)) / 1.414 - 0.13) * _soft(r - 0.8)
    raise ValueError(f"unknown shape family {family!r}")


def render(family: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One jittered 3-channel image of ``family``."""
    lin = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    theta = rng.uniform(-np.pi / 6, np.pi / 6)
    s = rng.uniform(0.75, 1.05)
    tx, ty = rng.uniform(-0.15, 0.15, size=2)
    c, sn = np.cos(theta), np.sin(theta)
    u = (c * (xx - tx) + sn * (yy - ty)) / s
    v = (-sn * (xx - tx) + c * (yy - ty)) / s
    mask = _shape_mask(family, u, v)
    fg = rng.uniform(0.65, 0.9)
    bg = rng.uniform(0.1, 0.3)
    lum = bg + (fg - bg) * mask
    tint = 1.0 + rng.uniform(-0.1, 0.1, size=3)
    img = lum[None, :, :] * tint[:, None, None]
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_synthetic(k: int, n: int, size: int = 16, seed: int = 0, splits: dict | None = None) -> Dataset:
    """``k`` balanced classes of ``n`` images each, one shape family per class.

    Split tags are assigned per class in the ``splits`` proportions.
    """
    if k < 2:
        raise ValueError("need at least 2 classes")
    if k > len(SHAPE_FAMILIES):
        raise ValueError(f"at most {len(SHAPE_FAMILIES)} shape families available, asked for {k}")
    if n < 1:
        raise ValueError("need at least one image per class")
    splits = dict(splits or DEFAULT_SPLITS)
    rng = np.random.default_rng(seed)
    images = np.empty((k * n, 3, size, size))
    labels = np.repeat(np.arange(k), n)
    tags = np.empty(k * n, dtype=object)
    names = list(splits)
    fracs = np.array([splits[s] for s in names], dtype=float)
    fracs = fracs / fracs.sum()
    counts = np.floor(fracs * n).astype(int)
    counts[0] += n - counts.sum()
    per_class_tags = np.repeat(np.array(names, dtype=object), counts)
    for cls in range(k):
        for j in range(n):
            images[cls * n + j] = render(SHAPE_FAMILIES[cls], size, rng)
        tags[cls * n:(cls + 1) * n] = per_class_tags[rng.permutation(n)]
    return Dataset(images, labels, k, tags, seed, {"n": n, "size": size})


def batches(dataset: Dataset, batch_size: int, seed: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` in a seeded permutation; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
