import json

import numpy as np
import pytest
from PIL import Image

from multer.autodiff import ContractError
from multer.data import (
    MANIFEST_HEADER,
    ManifestEntry,
    PatchRecord,
    PatchSet,
    SampleManifest,
    SynthSpec,
    augment,
    extract_patches,
    flip_batch,
    hflip,
    patch_count,
    patchset_from_manifest,
    plan_folds,
    prepare_public_style,
    read_manifest,
    read_pgm,
    synth_generate,
    write_manifest,
    write_synth_dataset,
)


def small_spec(**kw):
    base = dict(patch_size=32, per_class=4)
    base.update(kw)
    return SynthSpec(**base)


# -- patches


def test_patch_count_for_full_resolution_frame():
    assert patch_count(1920, 2560, 300, 300) == 48
    img = np.zeros((1920, 2560), dtype=np.float32)
    patches = extract_patches(img, 300, 300)
    assert len(patches) == 48
    assert max(p.grid for p in patches) == (5, 7)


def test_single_patch_when_size_equals_image():
    assert len(extract_patches(np.ones((300, 300)), 300)) == 1


def test_oversized_patch_rejected():
    with pytest.raises(ContractError):
        extract_patches(np.ones((300, 400)), 301)


def test_stride_equal_size_tiles_without_overlap():
    rng = np.random.default_rng(0)
    H, W, S = 37, 50, 8
    img = rng.normal(size=(H, W))
    hits = np.zeros((H, W), dtype=int)
    for p in extract_patches(img, S, S):
        r, c = p.grid
        hits[r * S : r * S + S, c * S : c * S + S] += 1
        np.testing.assert_array_equal(p.pixels[0], img[r * S : r * S + S, c * S : c * S + S])
    assert hits.max() == 1
    assert hits.sum() == patch_count(H, W, S, S) * S * S


@pytest.mark.parametrize("H,W,S,stride", [(10, 10, 3, 1), (64, 48, 16, 5), (300, 301, 100, 100)])
def test_patch_count_formula(H, W, S, stride):
    assert len(extract_patches(np.zeros((H, W)), S, stride)) == ((H - S) // stride + 1) * ((W - S) // stride + 1)


# -- folds


def synthetic_patchset(locations=(1, 2, 3, 4, 5, 6)):
    locs = np.repeat(locations, 8)
    n = len(locs)
    return PatchSet(
        np.zeros((n, 4, 4)),
        np.tile([1, 2, 3, 4], n // 4),
        [f"L{lab}S{loc}" for lab, loc in zip(np.tile([1, 2, 3, 4], n // 4), locs)],
        locs,
    )


def test_fold_plan_partitions_locations():
    plan = plan_folds(synthetic_patchset())
    assert len(plan) == 6
    assert sorted(loc for f in plan for loc in f.test_locations) == [1, 2, 3, 4, 5, 6]
    assert plan.folds[0].train_locations == {2, 3, 4, 5, 6}
    for f in plan:
        assert not f.test_locations & f.train_locations


def test_fold_splits_are_disjoint_and_cover():
    ps = synthetic_patchset()
    plan = plan_folds(ps)
    seen = []
    for f in plan:
        tr, te = plan.split(ps, f)
        assert len(tr) + len(te) == len(ps)
        assert not tr.provenance() & te.provenance()
        seen.extend(map(tuple, zip(te.sample_ids, te.locations)))
    assert len(seen) == len(ps)


def test_missing_location_named():
    with pytest.raises(ContractError, match=r"\[4\]"):
        plan_folds([1, 2, 3, 5, 6])


def test_access_log_records_reads():
    ps = synthetic_patchset()
    assert ps.access_log == []
    ps.batch([0, 1], "evaluate")
    assert ps.access_log == [("evaluate", 2)]


# -- augmentation


def test_flip_is_an_involution_and_keeps_label():
    rec = PatchRecord(np.arange(12.0).reshape(1, 3, 4), 3, "s", 2, (1, 1))
    np.testing.assert_array_equal(hflip(hflip(rec.pixels)), rec.pixels)
    rng = np.random.default_rng(0)
    for _ in range(10):
        out = augment(rec, rng)
        assert (out.label, out.sample_id, out.location, out.grid) == (3, "s", 2, (1, 1))


def test_flip_frequency_is_half():
    rng = np.random.default_rng(1)
    rec = PatchRecord(np.array([[[0.0, 1.0]]]), 1)
    flips = sum(augment(rec, rng).pixels[0, 0, 0] == 1.0 for _ in range(10000))
    assert 0.48 <= flips / 10000 <= 0.52
    batch = np.tile(np.array([0.0, 1.0]), (10000, 1, 1))
    frac = (flip_batch(batch, rng)[:, 0, 0] == 1.0).mean()
    assert 0.48 <= frac <= 0.52


# -- public-style preparation


def test_public_style_shape_and_identity_resize():
    rng = np.random.default_rng(2)
    for shape in [(1, 1), (100, 300), (512, 400)]:
        assert prepare_public_style(rng.uniform(size=shape), rng).shape == (224, 224)
    img = rng.uniform(size=(256, 256))
    crop, (y, x) = prepare_public_style(img, rng, return_offset=True)
    np.testing.assert_array_equal(crop, img[y : y + 224, x : x + 224])


def test_public_style_offsets_cover_corners():
    rng = np.random.default_rng(3)
    img = np.zeros((256, 256))
    offsets = {prepare_public_style(img, rng, return_offset=True)[1] for _ in range(20000)}
    assert (0, 0) in offsets and (32, 32) in offsets
    assert all(0 <= y <= 32 and 0 <= x <= 32 for y, x in offsets)


# -- synthetic generator


def test_synth_is_deterministic_and_balanced():
    a = synth_generate(small_spec()).patches
    b = synth_generate(small_spec()).patches
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert a.labels.tolist() == b.labels.tolist()
    levels, counts = np.unique(a.labels, return_counts=True)
    assert levels.tolist() == [1, 2, 3, 4] and counts.tolist() == [24] * 4
    for loc in range(1, 7):
        assert np.bincount(a.labels[a.locations == loc]).tolist() == [0, 4, 4, 4, 4]


def test_synth_seed_changes_pixels_not_counts():
    a = synth_generate(small_spec(seed=1)).patches
    b = synth_generate(small_spec(seed=2)).patches
    assert a.pixels.tobytes() != b.pixels.tobytes()
    assert np.array_equal(np.bincount(a.labels), np.bincount(b.labels))


def test_stroke_statistic_increases_with_level():
    ds = synth_generate(SynthSpec(patch_size=64, per_class=34, locations=(1, 2, 3, 4, 5, 6))).patches
    means = [ds.stats[ds.labels == lv].mean() for lv in (1, 2, 3, 4)]
    assert (ds.labels == 1).sum() >= 200
    assert all(b > a for a, b in zip(means, means[1:])), means


def test_spectral_exponent_decreases_with_level():
    ds = synth_generate(small_spec(property="smoothness", per_class=10)).patches
    means = [ds.stats[ds.labels == lv].mean() for lv in (1, 2, 3, 4)]
    assert all(b < a for a, b in zip(means, means[1:]))


def test_nuisances_are_class_independent():
    ds = synth_generate(SynthSpec(patch_size=16, per_class=200, locations=(1, 2, 3, 4, 5, 6)))
    rot = np.array([n.rotation_deg for n in ds.nuisances])
    labels = ds.patches.labels
    for lv in (2, 3, 4):
        assert abs(rot[labels == 1][:1000].mean() - rot[labels == lv][:1000].mean()) < 2.0


def test_synth_spec_validation():
    with pytest.raises(ContractError):
        SynthSpec(property="toweling")
    with pytest.raises(ContractError):
        SynthSpec(stroke_lengths=(4, 3, 5, 6))
    spec = small_spec(scale_range=(0.7, 1.4))
    assert SynthSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


# -- manifests


def test_manifest_roundtrip_csv_and_json(tmp_path):
    entries = [
        ManifestEntry("a.png", "s1", 1, 50, -30.0, 1, "normal", "with", {"fiber_length": 2}),
        ManifestEntry("b.png", "s1", 2, 200, 0.0, 2, "edof", "against", {"fiber_length": 3, "smoothness": 1}),
    ]
    write_manifest(SampleManifest(entries), tmp_path / "m.csv")
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == ",".join(MANIFEST_HEADER)
    back = read_manifest(tmp_path / "m.csv")
    assert back.entries == entries
    rows = [{**{k: v for k, v in vars(e).items() if k != "ratings"}, "ratings": e.ratings} for e in entries]
    (tmp_path / "m.json").write_text(json.dumps(rows))
    assert read_manifest(tmp_path / "m.json").entries == entries


def test_manifest_rejects_bad_rows(tmp_path):
    with pytest.raises(ContractError):
        ManifestEntry("x.png", "s", 7)
    with pytest.raises(ContractError):
        ManifestEntry("x.png", "s", 1, ratings={"smoothness": 5})
    with pytest.raises(ContractError):
        SampleManifest([ManifestEntry("x.png", "s", 1), ManifestEntry("x.png", "t", 2)])


def test_manifest_filters_pool_unspecified_factors():
    entries = [ManifestEntry(f"{i}.png", "s", 1 + i % 6, 50 if i % 2 else 200, lighting_id=1 + i % 2) for i in range(12)]
    m = SampleManifest(entries)
    assert len(m.select(zoom=50)) == 6
    assert len(m.select()) == 12


def test_patchset_from_manifest_reads_images(tmp_path):
    rng = np.random.default_rng(4)
    entries = []
    for loc in range(1, 7):
        arr = (rng.uniform(size=(40, 60)) * 255).astype(np.uint8)
        Image.fromarray(arr).save(tmp_path / f"{loc}.png")
        entries.append(ManifestEntry(f"{loc}.png", f"s{loc}", loc, ratings={"toweling": 1 + loc % 4}))
    write_manifest(SampleManifest(entries), tmp_path / "manifest.csv")
    ps = patchset_from_manifest(read_manifest(tmp_path / "manifest.csv"), "toweling", 20, 20)
    assert len(ps) == 6 * 2 * 3
    assert ps.pixels.shape == (36, 20, 20)
    assert ps.pixels.max() <= 1.0
    with pytest.raises(ContractError):
        patchset_from_manifest(read_manifest(tmp_path / "manifest.csv"), "smoothness", 20)


def test_written_dataset_matches_memory(tmp_path):
    ds = synth_generate(small_spec(per_class=2))
    manifest = write_synth_dataset(ds, tmp_path)
    assert len(list((tmp_path / "images").iterdir())) == len(ds.patches) == len(manifest)
    first = read_pgm(tmp_path / manifest.entries[0].path)
    assert np.abs(first - ds.patches.pixels[0]).max() <= 0.5 / 255 + 1e-12
    loaded = patchset_from_manifest(read_manifest(tmp_path / "manifest.csv"), "fiber_length", 32)
    assert loaded.labels.tolist() == ds.patches.labels.tolist()
