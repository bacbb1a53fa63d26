"""Raw imagery to labelled patch time series.

Covers the EuroSAT-style base corpus used by the synthetic generator and
the RaVAEn-style AOI pipeline: tiling into non-overlapping patches,
change-ratio labelling, stratified 7:1:2 splits and dataset statistics.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataio
from .errors import EmptyClass, SceneTooSmall, ShapeMismatch, TooFewPatches, UnreadableImage

log = logging.getLogger(__name__)

DISASTER_TYPES = ("fire", "flood", "hurricane", "landslide", "none")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}
# Sentinel-2 bands 4, 3, 2 (red, green, blue) as 0-based indices of a 13-band stack
RGB_BANDS = (3, 2, 1)


# --- base corpus -----------------------------------------------------------

class BaseCorpus:
    """Class-indexed image paths; images are decoded on demand."""

    def __init__(self, root, index: dict[str, list[Path]]):
        self.root = Path(root)
        self.index = index

    @property
    def name(self) -> str:
        return self.root.name

    @property
    def classes(self) -> list[str]:
        return sorted(self.index)

    def count(self, cls: str) -> int:
        return len(self.index[cls])

    def __len__(self) -> int:
        return sum(len(v) for v in self.index.values())

    def image(self, cls: str, i: int) -> np.ndarray:
        """(3, H, W) float64 RGB in [0, 1]."""
        return dataio.read_image(self.index[cls][i]).astype(np.float64) / 255.0


def load_base_corpus(root, verify: bool = True) -> BaseCorpus:
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not class_dirs:
        raise EmptyClass(f"no class directories under {root}")
    index = {}
    for d in class_dirs:
        files = sorted(p for p in d.iterdir() if p.is_file() and not p.name.startswith("."))
        if not files:
            raise EmptyClass(f"class directory {d} contains no images")
        for f in files:
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                raise UnreadableImage(f"not an image file: {f}")
            if verify:
                try:
                    with Image.open(f) as im:
                        im.verify()
                except Exception as exc:
                    raise UnreadableImage(f"cannot decode image {f}: {exc}") from exc
        index[d.name] = files
    return BaseCorpus(root, index)


# --- scenes and patches ----------------------------------------------------

@dataclass
class AoiScene:
    images: np.ndarray               # (T, C, H, W) floats in [0, 1]
    change_mask: np.ndarray          # (H, W) bool
    disaster_type: str = "none"
    aoi_id: str = "aoi"
    timestamps: list | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeMismatch(f"scene images must be (T, C, H, W), got {self.images.shape}")
        if self.change_mask.shape != self.images.shape[-2:]:
            raise ShapeMismatch(f"mask {self.change_mask.shape} does not match rasters {self.images.shape[-2:]}")
        if self.disaster_type not in DISASTER_TYPES:
            raise ValueError(f"unknown disaster type {self.disaster_type!r}")


@dataclass
class PatchTimeSeries:
    images: np.ndarray               # (T, C, P, P)
    aoi_id: str
    patch_coords: tuple[int, int]
    timestamps: list | None = None


@dataclass
class LabeledPatch:
    series: PatchTimeSeries
    label: int
    change_ratio: float
    disaster_type: str
    split: str | None = None
    mask: np.ndarray | None = field(default=None, repr=False)


def tile_aoi(scene: AoiScene, patch_size: int = 64) -> list[tuple[PatchTimeSeries, np.ndarray]]:
    """Non-overlapping ``P x P`` tiles in row-major order; partial edges dropped."""
    T, C, H, W = scene.images.shape
    P = patch_size
    if H < P or W < P:
        raise SceneTooSmall(f"scene {scene.aoi_id} is {H}x{W}, smaller than patch size {P}")
    out = []
    for r in range(H // P):
        for c in range(W // P):
            sl = (slice(r * P, (r + 1) * P), slice(c * P, (c + 1) * P))
            series = PatchTimeSeries(
                images=scene.images[:, :, sl[0], sl[1]],
                aoi_id=scene.aoi_id,
                patch_coords=(r, c),
                timestamps=scene.timestamps,
            )
            out.append((series, scene.change_mask[sl]))
    return out


def change_ratio(mask_tile) -> float:
    mask_tile = np.asarray(mask_tile)
    return float(np.count_nonzero(mask_tile) / mask_tile.size)


def label_patch(ratio: float, threshold: float = 0.5) -> int:
    return int(ratio >= threshold)


def split_dataset(strata, ratios=(7, 1, 2), seed: int = 0, names=dataio.SPLITS) -> list[str]:
    """Stratified, seeded split assignment.

    ``strata`` holds one hashable stratum key per item.  Global split sizes
    follow largest-remainder rounding of ``N * ratio``; inside every stratum
    each split receives the floor or ceiling of its quota.
    """
    strata = list(strata)
    N = len(strata)
    if N < 10:
        raise TooFewPatches(f"need >= 10 patches to split, got {N}")
    r = np.asarray(ratios, dtype=np.float64)
    r = r / r.sum()
    K = len(r)

    def largest_remainder(n, weights):
        exact = n * weights
        base = np.floor(exact).astype(int)
        order = np.argsort(-(exact - base), kind="stable")
        base[order[: n - base.sum()]] += 1
        return base

    targets = largest_remainder(N, r)
    groups = defaultdict(list)
    for i, s in enumerate(strata):
        groups[s].append(i)
    keys = sorted(groups, key=repr)

    alloc = {k: np.floor(len(groups[k]) * r).astype(int) for k in keys}
    extra = {k: len(groups[k]) - alloc[k].sum() for k in keys}
    need = targets - sum(alloc.values())
    frac = {k: len(groups[k]) * r - alloc[k] for k in keys}
    # hand out the leftover units: each stratum gets at most one per split
    for k in sorted(keys, key=lambda k: (-extra[k], repr(k))):
        for _ in range(extra[k]):
            cands = [j for j in range(K) if need[j] > 0 and alloc[k][j] == np.floor(len(groups[k]) * r[j])]
            if not cands:
                cands = [j for j in range(K) if alloc[k][j] == np.floor(len(groups[k]) * r[j])] or list(range(K))
            j = max(cands, key=lambda j: (need[j], frac[k][j], -j))
            alloc[k][j] += 1
            need[j] -= 1

    rng = np.random.default_rng(seed)
    out = [None] * N
    for k in keys:
        members = np.asarray(groups[k])[rng.permutation(len(groups[k]))]
        pos = 0
        for j in range(K):
            for i in members[pos : pos + alloc[k][j]]:
                out[int(i)] = names[j]
            pos += alloc[k][j]
    return out


def dataset_statistics(patches) -> dict[str, dict]:
    """Per disaster type: AOI count, patch count and positive ratio."""
    aois, counts, positives = defaultdict(set), defaultdict(int), defaultdict(int)
    for p in patches:
        t = p.disaster_type
        aois[t].add(p.series.aoi_id)
        counts[t] += 1
        positives[t] += int(p.label)
    return {
        t: {
            "aoi_count": len(aois[t]),
            "patch_count": counts[t],
            "positive_ratio": positives[t] / counts[t],
        }
        for t in sorted(counts)
    }


def change_ratio_histogram(ratios, bins: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Counts over ``bins`` equal-width bins spanning [0, 1] (last bin closed)."""
    counts, edges = np.histogram(np.asarray(list(ratios), dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return counts, edges


def write_histogram(counts, edges, csv_path, png_path=None) -> None:
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{lo:.4f}", f"{hi:.4f}", int(c)])
    if png_path is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="k")
        ax.set_xlabel("change ratio")
        ax.set_ylabel("patches")
        fig.tight_layout()
        fig.savefig(png_path, dpi=100)
        plt.close(fig)


def write_statistics(stats: dict, csv_path) -> None:
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["disaster_type", "aoi_count", "patch_count", "positive_ratio"])
        for t, row in stats.items():
            w.writerow([t, row["aoi_count"], row["patch_count"], f"{row['positive_ratio']:.4f}"])


# --- AOI loading -----------------------------------------------------------

def _load_raster(path: Path) -> np.ndarray:
    """(3, H, W) float RGB in [0, 1] from an image file or a band-stacked .npy."""
    if path.suffix == ".npy":
        arr = np.load(path)
        if arr.ndim != 3:
            raise ShapeMismatch(f"{path}: expected (bands, H, W), got {arr.shape}")
        if arr.shape[0] > 3:
            arr = arr[list(RGB_BANDS)]
        if arr.dtype == np.uint8:
            return arr.astype(np.float64) / 255.0
        if np.issubdtype(arr.dtype, np.integer):
            # Sentinel-2 L1C/L2A digital numbers: reflectance * 10000
            return np.clip(arr.astype(np.float64) / 10000.0, 0.0, 1.0)
        return np.clip(arr.astype(np.float64), 0.0, 1.0)
    return dataio.read_image(path).astype(np.float64) / 255.0


def load_aoi(directory) -> AoiScene:
    """Read an AOI directory: T co-registered rasters, ``mask.png`` and optional ``aoi.json``."""
    d = Path(directory)
    meta = json.loads((d / "aoi.json").read_text()) if (d / "aoi.json").is_file() else {}
    frames = sorted(
        p for p in d.iterdir()
        if p.is_file() and p.name != "mask.png" and (p.suffix.lower() in IMAGE_SUFFIXES or p.suffix == ".npy")
    )
    if len(frames) < 2:
        raise UnreadableImage(f"AOI {d} needs at least two rasters, found {len(frames)}")
    images = np.stack([_load_raster(p) for p in frames])
    with Image.open(d / "mask.png") as im:
        mask = np.asarray(im.convert("L")) > 127
    dtype = meta.get("disaster_type")
    if dtype is None:
        dtype = d.parent.name if d.parent.name in DISASTER_TYPES else "none"
    return AoiScene(images, mask, dtype, meta.get("aoi_id", d.name), meta.get("timestamps"))


def find_aois(aoi_root) -> list[Path]:
    """Every directory below ``aoi_root`` that holds a ``mask.png``."""
    return sorted(p.parent for p in Path(aoi_root).rglob("mask.png"))


def ingest_aois(aoi_root, out, patch_size: int = 64, seed: int = 0, label_threshold: float = 0.5,
                ratios=(7, 1, 2), hist_bins: int = 10) -> dict:
    """Tile every AOI, label, split and write the dataset plus statistics files."""
    patches: list[LabeledPatch] = []
    for aoi_dir in find_aois(aoi_root):
        scene = load_aoi(aoi_dir)
        for series, mask_tile in tile_aoi(scene, patch_size):
            ratio = change_ratio(mask_tile)
            patches.append(LabeledPatch(series, label_patch(ratio, label_threshold), ratio,
                                        scene.disaster_type, mask=mask_tile))
        log.info("tiled AOI %s (%s)", scene.aoi_id, scene.disaster_type)
    if not patches:
        raise TooFewPatches(f"no AOIs found under {aoi_root}")
    lengths = {p.series.images.shape[0] for p in patches}
    if len(lengths) != 1:
        raise ShapeMismatch(f"AOIs have differing series lengths {sorted(lengths)}")

    splits = split_dataset([(p.label, p.disaster_type) for p in patches], ratios, seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (p, split) in enumerate(zip(patches, splits)):
        p.split = split
        r, c = p.series.patch_coords
        rec_id = f"{p.series.aoi_id}_r{r:03d}_c{c:03d}"
        meta = {
            "id": rec_id,
            "label": p.label,
            "split": split,
            "disaster_type": p.disaster_type,
            "aoi_id": p.series.aoi_id,
            "patch_coords": [r, c],
            "timestamps": p.series.timestamps,
            "change_ratio": p.change_ratio,
        }
        dataio.write_record(out, rec_id, p.series.images, p.mask.astype(np.float64), meta)
        entries.append({k: meta[k] for k in ("id", "label", "split", "disaster_type", "change_ratio")})

    stats = dataset_statistics(patches)
    write_statistics(stats, out / "stats.csv")
    counts, edges = change_ratio_histogram([p.change_ratio for p in patches], hist_bins)
    write_histogram(counts, edges, out / "change_ratio_hist.csv", out / "change_ratio_hist.png")
    manifest = {
        "kind": "real",
        "seed": seed,
        "patch_size": patch_size,
        "series_length": lengths.pop(),
        "label_threshold": label_threshold,
        "split_ratio": list(ratios),
        "statistics": stats,
        "records": entries,
    }
    return dataio.write_manifest(out, manifest)
