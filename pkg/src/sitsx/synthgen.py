"""Synthetic satellite image time series.

A standalone base image is repeated over five timesteps.  The first four
receive random seasonal colour jitter and elliptical cloud cover; the last
one optionally receives a disaster footprint (a Gaussian-softened CutMix
from an image of another land-cover class) and seasonal jitter only.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import dataio
from .errors import CorpusTooSmall, DegenerateMask, ShapeMismatch

log = logging.getLogger(__name__)

SERIES_LENGTH = 5
# ITU-R 601 luma weights, used for the saturation jitter
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class GenParams:
    p1: float = 0.5
    p2: float = 0.3
    is_disaster: bool = False
    rng_seed: int = 0
    jitter_range: float = 0.2
    offset_range: float = 0.05
    ellipse_axes_range: tuple[float, float] = (0.10, 0.30)
    cloud_opacity_range: tuple[float, float] = (0.5, 1.0)
    cloud_value: tuple[float, float, float] = (1.0, 1.0, 1.0)
    cut_area_range: tuple[float, float] = (0.2, 0.5)
    blur_sigma: float = 2.0

    def __post_init__(self):
        for name in ("p1", "p2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        if not 0.0 <= self.jitter_range < 1.0:
            raise ValueError(f"jitter_range must lie in [0, 1), got {self.jitter_range}")
        for name in ("ellipse_axes_range", "cloud_opacity_range", "cut_area_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered low <= high, got {(lo, hi)}")
        lo, hi = self.cloud_opacity_range
        if lo < 0.0 or hi > 1.0:
            raise ValueError("cloud_opacity_range must lie in [0, 1]")
        lo, hi = self.cut_area_range
        if lo <= 0.0 or hi >= 1.0:
            raise ValueError("cut_area_range must lie in (0, 1)")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenParams":
        d = dict(d)
        for key in ("ellipse_axes_range", "cloud_opacity_range", "cloud_value", "cut_area_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Ellipse:
    """Ellipse in pixel units; ``angle`` in radians."""

    cy: float
    cx: float
    ay: float
    ax: float
    angle: float = 0.0

    def interior(self, height: int, width: int) -> np.ndarray:
        if self.ay <= 0 or self.ax <= 0:
            return np.zeros((height, width), dtype=bool)
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        dy, dx = yy - self.cy, xx - self.cx
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / self.ax) ** 2 + (v / self.ay) ** 2 <= 1.0


@dataclass
class SyntheticRecord:
    series: np.ndarray          # (5, C, P, P) floats in [0, 1]
    mask: np.ndarray            # (P, P) soft mask in [0, 1]
    label: int
    base_class: str | None
    cut_class: str | None
    params: GenParams
    transforms: list[dict] = field(default_factory=list)


def _check_image(img: np.ndarray) -> None:
    if img.ndim != 3:
        raise ShapeMismatch(f"expected a C x P x P image, got shape {img.shape}")


def apply_seasonal_change(img, brightness=1.0, contrast=1.0, saturation=1.0, offsets=0.0) -> np.ndarray:
    """Colour jitter: brightness (per channel), contrast, saturation, channel offsets.

    Each stage clips to [0, 1], the way colour-jitter pipelines do.
    """
    img = np.asarray(img, dtype=np.float64)
    _check_image(img)
    C = img.shape[0]
    b = np.broadcast_to(np.asarray(brightness, dtype=np.float64), (C,))
    out = np.clip(img * b[:, None, None], 0.0, 1.0)
    if contrast != 1.0:
        mean = out.mean()
        out = np.clip(mean + contrast * (out - mean), 0.0, 1.0)
    if saturation != 1.0 and C == 3:
        gray = np.tensordot(LUMA, out, axes=1)[None]
        out = np.clip(gray + saturation * (out - gray), 0.0, 1.0)
    off = np.broadcast_to(np.asarray(offsets, dtype=np.float64), (C,))
    if np.any(off != 0.0):
        out = np.clip(out + off[:, None, None], 0.0, 1.0)
    return out


def apply_cloud_cover(img, ellipse: Ellipse, opacity: float, cloud_value=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Alpha-blend ``cloud_value`` into the pixels inside ``ellipse``."""
    img = np.asarray(img, dtype=np.float64)
    _check_image(img)
    if not 0.0 <= opacity <= 1.0:
        raise ValueError(f"opacity must lie in [0, 1], got {opacity}")
    inside = ellipse.interior(img.shape[1], img.shape[2])
    cloud = np.broadcast_to(np.asarray(cloud_value, dtype=np.float64), (img.shape[0],))
    out = img.copy()
    out[:, inside] = (1.0 - opacity) * img[:, inside] + opacity * cloud[:, None]
    return out


def random_core(params: GenParams, rng: np.random.Generator, size: int) -> np.ndarray:
    """Axis-aligned binary rectangle whose area fraction lies in ``cut_area_range``."""
    area = rng.uniform(*params.cut_area_range) * size * size
    if round(area) < 1:
        raise DegenerateMask(f"cut area {area:.3f} px rounds to zero on a {size}x{size} patch")
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    h = int(np.clip(round(np.sqrt(area * aspect)), 1, size))
    w = int(np.clip(round(area / h), 1, size))
    top = int(rng.integers(0, size - h + 1))
    left = int(rng.integers(0, size - w + 1))
    core = np.zeros((size, size), dtype=np.float64)
    core[top : top + h, left : left + w] = 1.0
    return core


def generate_soft_mask(params: GenParams, rng: np.random.Generator, size: int) -> np.ndarray:
    core = random_core(params, rng, size)
    if params.blur_sigma <= 0:
        return core
    soft = gaussian_filter(core, sigma=params.blur_sigma, mode="constant", cval=0.0)
    return np.clip(soft / soft.max(), 0.0, 1.0)


def cutmix(base, cut, mask) -> np.ndarray:
    """``(1 - M) * base + M * cut`` with the mask broadcast over channels."""
    base = np.asarray(base, dtype=np.float64)
    cut = np.asarray(cut, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if base.shape != cut.shape or mask.shape != base.shape[-2:]:
        raise ShapeMismatch(f"cutmix shapes differ: base {base.shape}, cut {cut.shape}, mask {mask.shape}")
    return (1.0 - mask) * base + mask * cut


def _random_seasonal(img, params: GenParams, rng):
    j = params.jitter_range
    C = img.shape[0]
    drawn = {
        "brightness": rng.uniform(1 - j, 1 + j, size=C).tolist(),
        "contrast": float(rng.uniform(1 - j, 1 + j)),
        "saturation": float(rng.uniform(1 - j, 1 + j)),
        "offsets": rng.uniform(-params.offset_range, params.offset_range, size=C).tolist(),
    }
    return apply_seasonal_change(img, **drawn), drawn


def _random_cloud(img, params: GenParams, rng):
    P = img.shape[-1]
    lo, hi = params.ellipse_axes_range
    ellipse = Ellipse(
        cy=float(rng.uniform(0, P - 1)),
        cx=float(rng.uniform(0, P - 1)),
        ay=float(rng.uniform(lo, hi) * P),
        ax=float(rng.uniform(lo, hi) * P),
        angle=float(rng.uniform(0, np.pi)),
    )
    opacity = float(rng.uniform(*params.cloud_opacity_range))
    out = apply_cloud_cover(img, ellipse, opacity, params.cloud_value)
    return out, {"ellipse": dataclasses.asdict(ellipse), "opacity": opacity}


def generate_series(base, cut, params: GenParams, base_class=None, cut_class=None) -> SyntheticRecord:
    """Build one five-step series; deterministic given ``params.rng_seed``."""
    base = np.asarray(base, dtype=np.float64)
    _check_image(base)
    if params.is_disaster:
        cut = np.asarray(cut, dtype=np.float64)
        if cut.shape != base.shape:
            raise ShapeMismatch(f"cut image {cut.shape} does not match base {base.shape}")
    rng = np.random.default_rng(params.rng_seed)
    P = base.shape[-1]

    frames, log_ = [], []
    for _ in range(SERIES_LENGTH - 1):
        x, entry = base.copy(), {"seasonal": None, "cloud": None, "cutmix": False}
        if rng.random() < params.p1:
            x, entry["seasonal"] = _random_seasonal(x, params, rng)
        if rng.random() < params.p2:
            x, entry["cloud"] = _random_cloud(x, params, rng)
        frames.append(x)
        log_.append(entry)

    last = {"seasonal": None, "cloud": None, "cutmix": bool(params.is_disaster)}
    if params.is_disaster:
        mask = generate_soft_mask(params, rng, P)
        x5 = cutmix(base, cut, mask)
    else:
        mask = np.zeros((P, P), dtype=np.float64)
        x5 = base.copy()
    if rng.random() < params.p1:
        x5, last["seasonal"] = _random_seasonal(x5, params, rng)
    frames.append(x5)
    log_.append(last)

    return SyntheticRecord(
        series=np.stack(frames),
        mask=mask,
        label=int(params.is_disaster),
        base_class=base_class,
        cut_class=cut_class if params.is_disaster else None,
        params=params,
        transforms=log_,
    )


def record_seed(master_seed: int, index: int) -> int:
    """64-bit per-record seed derived from ``(master_seed, index)``."""
    state = np.random.SeedSequence([master_seed, index]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


def generate_dataset(
    corpus,
    count: int,
    out,
    split_ratio=(7, 1, 2),
    params_template: GenParams | None = None,
    master_seed: int = 0,
    disaster_fraction: float = 0.5,
):
    """Generate ``count`` series from ``corpus`` and write them to ``out``.

    Exactly ``round(disaster_fraction * count)`` records are disasters.
    Splits are stratified by label.  Returns the manifest dict.
    """
    from .ingest import split_dataset

    if count < 10:
        raise ValueError(f"count must be >= 10, got {count}")
    if not 0.0 <= disaster_fraction <= 1.0:
        raise ValueError(f"disaster_fraction must lie in [0, 1], got {disaster_fraction}")
    template = params_template or GenParams()
    classes = [c for c in corpus.classes if corpus.count(c) > 0]
    if len(classes) < 2 or len(classes) < len(corpus.classes):
        raise CorpusTooSmall(
            f"need >= 2 non-empty classes for cut selection, got {[(c, corpus.count(c)) for c in corpus.classes]}"
        )

    master = np.random.default_rng(master_seed)
    n_dis = int(round(disaster_fraction * count))
    is_dis = np.zeros(count, dtype=bool)
    is_dis[master.permutation(count)[:n_dis]] = True
    splits = split_dataset([int(v) for v in is_dis], split_ratio, seed=master_seed)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    width = max(5, len(str(count - 1)))
    for i in range(count):
        seed = record_seed(master_seed, i)
        pick = np.random.default_rng(seed ^ 0x5EED)
        base_class = classes[int(pick.integers(len(classes)))]
        base_idx = int(pick.integers(corpus.count(base_class)))
        others = [c for c in classes if c != base_class]
        cut_class = others[int(pick.integers(len(others)))]
        cut_idx = int(pick.integers(corpus.count(cut_class)))
        params = dataclasses.replace(template, is_disaster=bool(is_dis[i]), rng_seed=seed)
        base = corpus.image(base_class, base_idx)
        cut = corpus.image(cut_class, cut_idx) if params.is_disaster else None
        rec = generate_series(base, cut, params, base_class, cut_class)

        rec_id = f"s{i:0{width}d}"
        meta = {
            "id": rec_id,
            "label": rec.label,
            "split": splits[i],
            "disaster_type": "synthetic",
            "base_class": base_class,
            "base_index": base_idx,
            "cut_class": rec.cut_class,
            "cut_index": cut_idx if params.is_disaster else None,
            "seed": seed,
            "params": params.to_dict(),
            "transforms": rec.transforms,
            "change_ratio": float((rec.mask > 0.5).mean()),
        }
        dataio.write_record(out, rec_id, rec.series, rec.mask, meta)
        entries.append({k: meta[k] for k in ("id", "label", "split", "disaster_type", "change_ratio")})
        if (i + 1) % 500 == 0:
            log.info("generated %d/%d series", i + 1, count)

    manifest = {
        "kind": "synthetic",
        "master_seed": master_seed,
        "count": count,
        "series_length": SERIES_LENGTH,
        "patch_size": int(base.shape[-1]),
        "split_ratio": list(split_ratio),
        "disaster_fraction": disaster_fraction,
        "params": template.to_dict(),
        "corpus": {"root": corpus.name, "classes": {c: corpus.count(c) for c in classes}},
        "records": entries,
    }
    return dataio.write_manifest(out, manifest)
