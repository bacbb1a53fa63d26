"""On-disk patch time series format.

Layout::

    <root>/manifest.json
    <root>/<record id>/t1.png ... tT.png   8-bit RGB
    <root>/<record id>/mask.png            8-bit grayscale, round(255 * M)
    <root>/<record id>/meta.json

``PatchDataset`` reads a split into memory as uint8 arrays and routes every
read through a ``SplitAccessAudit`` so training code can prove it never
touched the test split.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataMissing, TestSplitAccess, UnreadableImage

FORMAT = "sitsx-dataset"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
DATA_ROOT_ENV = "SITSX_DATA_ROOT"


def resolve_data_path(path) -> Path:
    """Resolve relative dataset paths against ``$SITSX_DATA_ROOT`` when set."""
    path = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_record(root, rec_id: str, series: np.ndarray, mask: np.ndarray, meta: dict) -> Path:
    """Write one series (T, C, P, P floats in [0, 1]) plus its mask and metadata."""
    d = Path(root) / rec_id
    d.mkdir(parents=True, exist_ok=True)
    for t, img in enumerate(series, start=1):
        Image.fromarray(to_uint8(np.moveaxis(img, 0, -1))).save(d / f"t{t}.png", optimize=False)
    Image.fromarray(to_uint8(mask), mode="L").save(d / "mask.png", optimize=False)
    _dump_json(d / "meta.json", meta)
    return d


def write_manifest(root, manifest: dict) -> dict:
    records = manifest.get("records", [])
    full = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        **manifest,
        "split_counts": dict(sorted(Counter(r["split"] for r in records).items())),
    }
    _dump_json(Path(root) / "manifest.json", full)
    return full


def read_image(path) -> np.ndarray:
    """Decode an image file to a (3, H, W) uint8 array."""
    try:
        with Image.open(path) as im:
            return np.moveaxis(np.asarray(im.convert("RGB")), -1, 0).copy()
    except (OSError, ValueError) as exc:
        raise UnreadableImage(f"cannot decode image {path}: {exc}") from exc


class SplitAccessAudit:
    """Counts split reads and refuses reads of forbidden splits."""

    def __init__(self):
        self.reads: Counter = Counter()
        self._forbidden: list[str] = []

    @contextmanager
    def forbid(self, *splits: str):
        self._forbidden.extend(splits)
        try:
            yield self
        finally:
            for s in splits:
                self._forbidden.remove(s)

    def check(self, split: str) -> None:
        if split in self._forbidden:
            raise TestSplitAccess(f"split {split!r} read while forbidden by the access audit")
        self.reads[split] += 1


@dataclass
class SplitData:
    ids: list[str]
    images: np.ndarray           # (N, T, C, P, P) uint8
    labels: np.ndarray           # (N,) int64
    disaster_types: list[str]
    aoi_ids: list[str | None]
    patch_coords: list

    def __len__(self) -> int:
        return len(self.ids)

    def float_images(self, index=slice(None)) -> np.ndarray:
        return self.images[index].astype(np.float32) / 255.0


class PatchDataset:
    def __init__(self, root, audit: SplitAccessAudit | None = None):
        self.root = resolve_data_path(root)
        path = self.root / "manifest.json"
        if not path.is_file():
            raise DataMissing(f"no dataset manifest at {path}")
        self.manifest = json.loads(path.read_text())
        if self.manifest.get("format") != FORMAT:
            raise DataMissing(f"{path} is not a {FORMAT} manifest")
        self.audit = audit or SplitAccessAudit()
        self._cache: dict[str, SplitData] = {}

    @property
    def kind(self) -> str:
        return self.manifest.get("kind", "real")

    @property
    def records(self) -> list[dict]:
        return self.manifest["records"]

    def ids(self, split: str) -> list[str]:
        return [r["id"] for r in self.records if r["split"] == split]

    def load(self, split: str) -> SplitData:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        self.audit.check(split)
        if split not in self._cache:
            self._cache[split] = self._read(split)
        return self._cache[split]

    def _read(self, split: str) -> SplitData:
        rows = [r for r in self.records if r["split"] == split]
        if not rows:
            raise DataMissing(f"split {split!r} of {self.root} is empty")
        T = int(self.manifest.get("series_length", 5))
        images, metas = [], []
        for r in rows:
            d = self.root / r["id"]
            images.append(np.stack([read_image(d / f"t{t}.png") for t in range(1, T + 1)]))
            metas.append(json.loads((d / "meta.json").read_text()))
        return SplitData(
            ids=[r["id"] for r in rows],
            images=np.stack(images),
            labels=np.array([int(r["label"]) for r in rows], dtype=np.int64),
            disaster_types=[r.get("disaster_type", "none") for r in rows],
            aoi_ids=[m.get("aoi_id") for m in metas],
            patch_coords=[m.get("patch_coords") for m in metas],
        )
