"""Procedural coloured-shapes dataset laid out like Food-11.

Each image is a single filled or outlined shape with random position, size,
foreground colour and a noisy background. The class is the shape.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

SHAPES = (
    "circle", "square", "triangle", "diamond", "plus", "ring",
    "hbar", "vbar", "xcross", "frame", "halfdisk",
)


def shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ady, adx = np.abs(dy), np.abs(dx)
    t = max(2.0, r * 0.3)
    if kind == "circle":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (ady <= r * 0.85) & (adx <= r * 0.85)
    if kind == "triangle":
        # apex up, base at cy + 0.8r
        return (dy <= r * 0.8) & (dy >= -r) & (adx <= (dy + r) * 0.6)
    if kind == "diamond":
        return ady + adx <= r
    if kind == "plus":
        return ((ady <= t / 2) & (adx <= r)) | ((adx <= t / 2) & (ady <= r))
    if kind == "ring":
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= r - t)
    if kind == "hbar":
        return (ady <= r * 0.3) & (adx <= r)
    if kind == "vbar":
        return (adx <= r * 0.3) & (ady <= r)
    if kind == "xcross":
        u, v = np.abs(dy + dx) / np.sqrt(2), np.abs(dy - dx) / np.sqrt(2)
        return ((u <= t / 2) & (v <= r)) | ((v <= t / 2) & (u <= r))
    if kind == "frame":
        outer = (ady <= r * 0.85) & (adx <= r * 0.85)
        inner = (ady <= r * 0.85 - t) & (adx <= r * 0.85 - t)
        return outer & ~inner
    if kind == "halfdisk":
        return (dy**2 + dx**2 <= r**2) & (dy >= -r * 0.1) & (dy <= r)
    raise ValueError(f"unknown shape {kind!r}")


def render(kind: str, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Render one (3, size, size) float image in [0, 1]."""
    r = rng.uniform(0.2, 0.3) * size
    jitter = size * 0.12
    cy = size / 2 + rng.uniform(-jitter, jitter)
    cx = size / 2 + rng.uniform(-jitter, jitter)
    bg = rng.uniform(0.0, 0.45, size=3)
    fg = rng.uniform(0.55, 1.0, size=3)
    img = bg[:, None, None] + rng.normal(0.0, 0.05, size=(3, size, size))
    mask = shape_mask(kind, size, cy, cx, r)
    img[:, mask] = fg[:, None] + rng.normal(0.0, 0.03, size=(3, int(mask.sum())))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_shapes(
    root,
    counts: dict[str, int] | None = None,
    classes: Sequence[str] = SHAPES,
    size: int = 64,
    seed: int = 0,
) -> Path:
    """Write ``<root>/<split>/<shape>/<nnnn>.png`` images.

    ``counts`` maps split name to images per class; the default gives
    1,100 / 220 / 220 images for 11 classes.
    """
    from PIL import Image

    counts = counts or {"training": 100, "validation": 20, "evaluation": 20}
    root = Path(root)
    for s, (split, per_class) in enumerate(counts.items()):
        for c, kind in enumerate(classes):
            d = root / split / kind
            d.mkdir(parents=True, exist_ok=True)
            rng = np.random.default_rng([seed, s, SHAPES.index(kind) if kind in SHAPES else c])
            for i in range(per_class):
                img = render(kind, rng, size)
                arr = np.rint(img.transpose(1, 2, 0) * 255).astype(np.uint8)
                Image.fromarray(arr).save(d / f"{i:04d}.png")
    return root
