import csv
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from sitsx.dataio import PatchDataset, SplitAccessAudit
from sitsx import errors
from sitsx.errors import EmptyClass, SceneTooSmall, ShapeMismatch, TooFewPatches, UnreadableImage
from sitsx.ingest import (
    AoiScene,
    LabeledPatch,
    PatchTimeSeries,
    change_ratio,
    change_ratio_histogram,
    dataset_statistics,
    ingest_aois,
    label_patch,
    load_aoi,
    load_base_corpus,
    split_dataset,
    tile_aoi,
)


def _scene(H, W, T=3, seed=0, dtype="flood"):
    rng = np.random.default_rng(seed)
    return AoiScene(rng.random((T, 3, H, W)), rng.random((H, W)) > 0.5, dtype, f"aoi{seed}")


# --- tiling ----------------------------------------------------------------------

@pytest.mark.parametrize("size, count", [(128, 4), (130, 4), (64, 1), (200, 9)])
def test_tile_counts(size, count):
    assert len(tile_aoi(_scene(size, size), 64)) == count


def test_tile_rectangular_and_coords():
    tiles = tile_aoi(_scene(70, 140), 32)
    assert [t.patch_coords for t, _ in tiles] == [(r, c) for r in range(2) for c in range(4)]


def test_tile_too_small():
    with pytest.raises(SceneTooSmall):
        tile_aoi(_scene(63, 128), 64)


@settings(max_examples=30, deadline=None)
@given(st.integers(8, 40), st.integers(8, 40), st.sampled_from([4, 8]))
def test_tiling_partitions_the_crop(H, W, P):
    scene = _scene(H, W, T=2, seed=H * 100 + W)
    tiles = tile_aoi(scene, P)
    gh, gw = H // P, W // P
    images = np.zeros((2, 3, gh * P, gw * P))
    mask = np.zeros((gh * P, gw * P), dtype=bool)
    covered = np.zeros((gh * P, gw * P), dtype=int)
    for series, m in tiles:
        r, c = series.patch_coords
        images[:, :, r * P:(r + 1) * P, c * P:(c + 1) * P] = series.images
        mask[r * P:(r + 1) * P, c * P:(c + 1) * P] = m
        covered[r * P:(r + 1) * P, c * P:(c + 1) * P] += 1
    assert (covered == 1).all()
    np.testing.assert_array_equal(images, scene.images[:, :, :gh * P, :gw * P])
    np.testing.assert_array_equal(mask, scene.change_mask[:gh * P, :gw * P])


def test_scene_validation():
    with pytest.raises(ShapeMismatch):
        AoiScene(np.zeros((2, 3, 8, 8)), np.zeros((8, 9), bool))
    with pytest.raises(ValueError):
        AoiScene(np.zeros((2, 3, 8, 8)), np.zeros((8, 8), bool), "volcano")


# --- labels ----------------------------------------------------------------------

def test_change_ratio_examples():
    assert change_ratio(np.zeros((64, 64))) == 0.0
    assert change_ratio(np.ones((64, 64))) == 1.0
    m = np.zeros((64, 64), bool)
    m[:16] = True
    assert change_ratio(m) == 0.25


@pytest.mark.parametrize("ratio, threshold, label", [(0.0, 0.5, 0), (1.0, 0.5, 1), (0.6, 0.5, 1),
                                                     (0.5, 0.5, 1), (0.3, 0.2, 1), (0.3, 0.4, 0)])
def test_label_patch(ratio, threshold, label):
    assert label_patch(ratio, threshold) == label


@given(st.floats(0, 1), st.floats(0, 1))
def test_label_monotone(a, b):
    lo, hi = sorted((a, b))
    assert label_patch(lo) <= label_patch(hi)


# --- splits ------------------------------------------------------------------------

def test_split_ten():
    assert Counter(split_dataset([0] * 10, seed=3)) == {"train": 7, "val": 1, "test": 2}


def test_split_4096_two_strata():
    rng = np.random.default_rng(0)
    strata = list(zip(rng.integers(0, 2, 4096).tolist(), rng.choice(["fire", "flood", "none"], 4096).tolist()))
    counts = Counter(split_dataset(strata, seed=1))
    assert 2866 <= counts["train"] <= 2868
    assert sum(counts.values()) == 4096


def test_split_deterministic_and_seeded():
    strata = [i % 3 for i in range(100)]
    assert split_dataset(strata, seed=4) == split_dataset(strata, seed=4)
    assert split_dataset(strata, seed=4) != split_dataset(strata, seed=5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=10, max_size=300), st.integers(0, 1000))
def test_split_stratified_quotas(strata, seed):
    splits = split_dataset(strata, seed=seed)
    assert len(splits) == len(strata)
    assert set(splits) <= {"train", "val", "test"}
    for key in set(strata):
        members = [s for s, k in zip(splits, strata) if k == key]
        n = len(members)
        c = Counter(members)
        for name, frac in (("train", 0.7), ("val", 0.1), ("test", 0.2)):
            assert abs(c[name] - frac * n) < 1.0 + 1e-9
    total = Counter(splits)
    for name, frac in (("train", 0.7), ("val", 0.1), ("test", 0.2)):
        assert abs(total[name] - frac * len(strata)) < 1.0 + 1e-9


def test_split_too_few():
    with pytest.raises(TooFewPatches):
        split_dataset([0] * 9)


# --- statistics ------------------------------------------------------------------

def _patches(n, positives, dtype, aois=1):
    out = []
    for i in range(n):
        series = PatchTimeSeries(np.zeros((2, 3, 1, 1)), f"{dtype}{i % aois}", (0, i))
        out.append(LabeledPatch(series, int(i < positives), float(i < positives), dtype))
    return out


def test_statistics_table_rows():
    stats = dataset_statistics(_patches(3069, 986, "flood", aois=4) + _patches(8303, 4842, "fire", aois=5))
    assert stats["flood"]["patch_count"] == 3069 and stats["flood"]["aoi_count"] == 4
    assert round(100 * stats["flood"]["positive_ratio"], 2) == 32.13
    assert stats["fire"]["patch_count"] == 8303 and stats["fire"]["aoi_count"] == 5
    assert round(100 * stats["fire"]["positive_ratio"], 2) == 58.32
    assert dataset_statistics(_patches(10, 0, "none"))["none"]["positive_ratio"] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["fire", "flood", "landslide"]), st.integers(0, 1)), min_size=1, max_size=60))
def test_statistics_match_recount(rows):
    patches = [LabeledPatch(PatchTimeSeries(np.zeros((2, 3, 1, 1)), t, (0, i)), y, float(y), t)
               for i, (t, y) in enumerate(rows)]
    stats = dataset_statistics(patches)
    for t in {t for t, _ in rows}:
        labels = [y for tt, y in rows if tt == t]
        assert stats[t]["patch_count"] == len(labels)
        assert stats[t]["positive_ratio"] == sum(labels) / len(labels)


def test_histogram_examples():
    counts, edges = change_ratio_histogram([0, 0, 1], bins=2)
    assert counts.tolist() == [2, 1]
    np.testing.assert_allclose(edges, [0, 0.5, 1])
    assert change_ratio_histogram([], bins=4)[0].tolist() == [0, 0, 0, 0]


# --- base corpus ---------------------------------------------------------------

def _write_png(path, value=128, size=8):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((size, size, 3), value, np.uint8)).save(path)


def test_load_corpus(tmp_path):
    for i, cls in enumerate(["Forest", "River"]):
        _write_png(tmp_path / cls / "a.png", value=51 * (i + 1))
        _write_png(tmp_path / cls / "b.png")
    corpus = load_base_corpus(tmp_path)
    assert corpus.classes == ["Forest", "River"] and len(corpus) == 4
    img = corpus.image("River", 0)
    assert img.shape == (3, 8, 8) and img.dtype == np.float64
    assert img.max() == pytest.approx(0.4)


def test_load_corpus_errors(tmp_path):
    with pytest.raises(EmptyClass):
        load_base_corpus(tmp_path)
    (tmp_path / "Empty").mkdir()
    with pytest.raises(EmptyClass):
        load_base_corpus(tmp_path)
    _write_png(tmp_path / "Empty" / "ok.png")
    bad = tmp_path / "Empty" / "notes.txt"
    bad.write_text("hello")
    with pytest.raises(UnreadableImage, match="notes.txt"):
        load_base_corpus(tmp_path)
    bad.unlink()
    (tmp_path / "Empty" / "broken.png").write_bytes(b"\x89PNG garbage")
    with pytest.raises(UnreadableImage, match="broken.png"):
        load_base_corpus(tmp_path)


# --- AOI ingestion ------------------------------------------------------------------

def _write_aoi(root, dtype, name, H=40, W=40, T=3, seed=0, changed_rows=20):
    d = root / dtype / name
    d.mkdir(parents=True)
    rng = np.random.default_rng(seed)
    for t in range(T):
        Image.fromarray(rng.integers(0, 256, (H, W, 3), dtype=np.uint8)).save(d / f"{t:02d}.png")
    mask = np.zeros((H, W), np.uint8)
    mask[:changed_rows] = 255
    Image.fromarray(mask).save(d / "mask.png")
    return d


def test_load_aoi_npy_bands(tmp_path):
    d = tmp_path / "fire" / "x"
    d.mkdir(parents=True)
    bands = np.zeros((13, 8, 8), np.uint16)
    bands[3], bands[2], bands[1] = 5000, 2500, 10000   # B4, B3, B2
    for t in range(2):
        np.save(d / f"t{t}.npy", bands)
    Image.fromarray(np.zeros((8, 8), np.uint8)).save(d / "mask.png")
    scene = load_aoi(d)
    assert scene.disaster_type == "fire" and scene.aoi_id == "x"
    np.testing.assert_allclose(scene.images[0, :, 0, 0], [0.5, 0.25, 1.0])


def test_ingest_end_to_end(tmp_path):
    for k, dtype in enumerate(["fire", "flood", "hurricane", "landslide"]):
        _write_aoi(tmp_path / "aois", dtype, f"{dtype}_a", seed=k)
    manifest = ingest_aois(tmp_path / "aois", tmp_path / "ds", patch_size=16, seed=0)
    # 40x40 scenes give 2x2 patches; the top 20 rows changed, so row 0 is positive
    assert len(manifest["records"]) == 16
    assert manifest["kind"] == "real" and manifest["series_length"] == 3
    labels = {r["id"]: r["label"] for r in manifest["records"]}
    assert labels["fire_a_r000_c001"] == 1 and labels["fire_a_r001_c000"] == 0
    ratios = {r["id"]: r["change_ratio"] for r in manifest["records"]}
    assert ratios["flood_a_r001_c001"] == pytest.approx(4 / 16)
    rows = list(csv.DictReader(open(tmp_path / "ds" / "stats.csv")))
    assert [r["disaster_type"] for r in rows] == ["fire", "flood", "hurricane", "landslide"]
    assert all(r["patch_count"] == "4" and r["positive_ratio"] == "0.5000" for r in rows)
    assert (tmp_path / "ds" / "change_ratio_hist.csv").is_file()
    assert (tmp_path / "ds" / "change_ratio_hist.png").is_file()

    ds = PatchDataset(tmp_path / "ds")
    all_ids = []
    for split in ("train", "val", "test"):
        ids = ds.ids(split)
        all_ids += ids
        if ids:
            data = ds.load(split)
            assert data.images.shape[1:] == (3, 3, 16, 16)
            assert all(a is not None and len(c) == 2 for a, c in zip(data.aoi_ids, data.patch_coords))
    assert sorted(all_ids) == sorted(labels)
    meta = json.loads((tmp_path / "ds" / "fire_a_r000_c000" / "meta.json").read_text())
    assert meta["patch_coords"] == [0, 0] and meta["aoi_id"] == "fire_a"
    # pixels survive the round trip exactly
    src = np.asarray(Image.open(tmp_path / "aois" / "fire" / "fire_a" / "01.png"))[:16, 16:32]
    out = np.asarray(Image.open(tmp_path / "ds" / "fire_a_r000_c001" / "t2.png"))
    np.testing.assert_array_equal(src, out)


def test_split_access_audit():
    audit = SplitAccessAudit()
    audit.check("train")
    with audit.forbid("test"):
        audit.check("val")
        with pytest.raises(errors.TestSplitAccess):
            audit.check("test")
    audit.check("test")
    assert audit.reads == {"train": 1, "val": 1, "test": 1}
