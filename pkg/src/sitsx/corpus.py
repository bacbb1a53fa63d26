"""Procedural land-cover image corpus.

Stand-in for EuroSAT when the real archive is not at hand: ten classes
named after the EuroSAT classes, each drawn from its own palette and
spatial texture (stripes for crops, blobs for forest, roads, building
blocks, rivers...).  Every image is fully determined by (seed, class,
index).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

EUROSAT_CLASSES = (
    "AnnualCrop",
    "Forest",
    "HerbaceousVegetation",
    "Highway",
    "Industrial",
    "Pasture",
    "PermanentCrop",
    "Residential",
    "River",
    "SeaLake",
)


def _noise(rng, size, sigma):
    n = gaussian_filter(rng.normal(size=(size, size)), sigma=sigma, mode="wrap")
    n -= n.mean()
    return n / (n.std() + 1e-12)


def _palette(rng, base, spread=0.06):
    return np.clip(np.asarray(base) + rng.normal(0, spread, size=3), 0.0, 1.0)


def _paint(mask, colour, img):
    img[:, mask] = np.asarray(colour)[:, None]


def _stripes(rng, size, width):
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    proj = np.cos(theta) * xx + np.sin(theta) * yy + rng.uniform(0, 100)
    return (proj // width).astype(int)


def _line_mask(rng, size, width):
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(size * 0.2, size * 0.8, size=2)
    dist = np.abs(-np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy))
    return dist < width / 2


def render(cls: str, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """One (3, size, size) float image of class ``cls``."""
    s = size / 64.0
    img = np.empty((3, size, size))
    tex = _noise(rng, size, 1.0 * s + 0.5)

    if cls == "AnnualCrop":
        bands = _stripes(rng, size, rng.uniform(4, 9) * s)
        cols = [_palette(rng, c) for c in ([0.55, 0.5, 0.3], [0.4, 0.55, 0.25], [0.7, 0.6, 0.45])]
        for k in range(3):
            _paint(bands % 3 == k, cols[k], img)
        img += 0.03 * tex
    elif cls == "Forest":
        base = _palette(rng, [0.12, 0.3, 0.12])
        img[:] = base[:, None, None] * (1 + 0.25 * _noise(rng, size, 1.5 * s))
    elif cls == "HerbaceousVegetation":
        base = _palette(rng, [0.45, 0.55, 0.25])
        img[:] = base[:, None, None] * (1 + 0.12 * tex + 0.1 * _noise(rng, size, 4 * s))
    elif cls == "Highway":
        img[:] = _palette(rng, [0.4, 0.48, 0.3])[:, None, None] * (1 + 0.1 * tex)
        for _ in range(rng.integers(1, 3)):
            _paint(_line_mask(rng, size, rng.uniform(3, 6) * s), _palette(rng, [0.55, 0.55, 0.55], 0.04), img)
    elif cls == "Industrial":
        img[:] = _palette(rng, [0.5, 0.5, 0.5])[:, None, None]
        for _ in range(rng.integers(3, 7)):
            h, w = rng.integers(int(8 * s), int(24 * s) + 1, size=2)
            y, x = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
            img[:, y : y + h, x : x + w] = _palette(rng, [0.75, 0.75, 0.78], 0.08)[:, None, None]
        img += 0.03 * tex
    elif cls == "Pasture":
        base = _palette(rng, [0.5, 0.65, 0.35])
        img[:] = base[:, None, None] * (1 + 0.05 * _noise(rng, size, 6 * s))
    elif cls == "PermanentCrop":
        img[:] = _palette(rng, [0.55, 0.45, 0.3])[:, None, None]
        step = max(2, int(round(rng.uniform(4, 7) * s)))
        yy, xx = np.mgrid[0:size, 0:size]
        dots = ((yy % step) < step // 2) & ((xx % step) < step // 2)
        _paint(dots, _palette(rng, [0.2, 0.4, 0.15]), img)
        img += 0.03 * tex
    elif cls == "Residential":
        img[:] = _palette(rng, [0.45, 0.45, 0.42])[:, None, None]
        cell = max(3, int(round(rng.uniform(5, 8) * s)))
        for y in range(0, size, cell):
            for x in range(0, size, cell):
                if rng.random() < 0.7:
                    roof = _palette(rng, [0.7, 0.35, 0.3] if rng.random() < 0.5 else [0.65, 0.65, 0.65], 0.08)
                    img[:, y : y + cell - 1, x : x + cell - 1] = roof[:, None, None]
    elif cls == "River":
        img[:] = _palette(rng, [0.3, 0.45, 0.2])[:, None, None] * (1 + 0.1 * tex)
        yy, xx = np.mgrid[0:size, 0:size]
        amp, freq, phase = rng.uniform(3, 10) * s, rng.uniform(0.5, 2) * 2 * np.pi / size, rng.uniform(0, 2 * np.pi)
        centre = size / 2 + rng.uniform(-8, 8) * s + amp * np.sin(freq * xx + phase)
        coords = (yy, xx) if rng.random() < 0.5 else (xx, yy)
        band = np.abs(coords[0] - centre) < rng.uniform(3, 7) * s
        _paint(band, _palette(rng, [0.1, 0.2, 0.35], 0.04), img)
    elif cls == "SeaLake":
        base = _palette(rng, [0.05, 0.15, 0.35], 0.04)
        img[:] = base[:, None, None] * (1 + 0.08 * _noise(rng, size, 3 * s))
    else:
        raise ValueError(f"unknown class {cls!r}")
    return np.clip(img, 0.0, 1.0)


def make_corpus(out, per_class: int = 60, size: int = 64, seed: int = 0, classes=EUROSAT_CLASSES) -> Path:
    """Write ``per_class`` PNGs for every class under ``out/<class>/``."""
    out = Path(out)
    for ci, cls in enumerate(classes):
        d = out / cls
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            rng = np.random.default_rng([seed, ci, i])
            img = render(cls, rng, size)
            arr = np.round(np.moveaxis(img, 0, -1) * 255).astype(np.uint8)
            Image.fromarray(arr).save(d / f"{cls}_{i + 1}.png")
    return out
