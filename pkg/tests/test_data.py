import shutil
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from appaunet import data as D
from appaunet.data import DatasetError, ManifestError

from _fixtures import make_scx
from _oracles import block_mean

SPLIT_SIZES = {"MCX": (93, 10, 35), "SCX": (355, 40, 132), "JCX": (166, 19, 62), "CCX": (615, 69, 228)}
CLASSES = {
    "MCX": {0: 80, 1: 58},
    "SCX": {0: 248, 1: 279},
    "JCX": {0: 93, 1: 154},
    "CCX": {0: 421, 1: 337, 2: 154},
}


@pytest.fixture(scope="module")
def loaded(archive):
    return {name: D.load_dataset(D.get_spec(name, archive), seed=0, size=16) for name in SPLIT_SIZES}


# ---------------------------------------------------------------- real-dataset protocol


@pytest.mark.parametrize("name", list(SPLIT_SIZES))
def test_split_sizes_and_class_counts(loaded, name):
    parts = loaded[name]
    assert tuple(len(p) for p in parts) == SPLIT_SIZES[name]
    counts = Counter(s.class_label for p in parts for s in p)
    assert dict(counts) == CLASSES[name]


@pytest.mark.parametrize("name", list(SPLIT_SIZES))
def test_splits_disjoint_and_well_formed(loaded, name):
    ids = [s.source_id for p in loaded[name] for s in p]
    assert len(ids) == len(set(ids))
    for p in loaded[name]:
        for s in p:
            assert s.image.shape == (16, 16) and s.mask.shape == (16, 16)
            assert 0 <= s.image.min() and s.image.max() <= 1
            assert set(np.unique(s.mask)) <= {0, 1}


def test_split_is_deterministic_and_stratified(archive, loaded):
    again = D.load_dataset(D.get_spec("MCX", archive), seed=0, size=16)
    assert [[s.source_id for s in p] for p in again] == [[s.source_id for s in p] for p in loaded["MCX"]]
    other = D.load_dataset(D.get_spec("MCX", archive), seed=1, size=16)
    assert [s.source_id for s in other[2]] != [s.source_id for s in loaded["MCX"][2]]
    # test split of 35 drawn from 80/58: quotas 20.29 / 14.71 -> 20 / 15
    assert Counter(s.class_label for s in loaded["MCX"][2]) == {0: 20, 1: 15}


def test_mcx_masks_are_left_right_union(loaded):
    s = loaded["MCX"][0][0]
    assert s.mask[:, :8].any() and s.mask[:, 8:].any()


def test_ccx_relabels_jcx_nodules(loaded):
    ccx = [s for p in loaded["CCX"] for s in p]
    assert all(s.class_label == 2 for s in ccx if s.source_id.startswith("JCX/JPCLN"))
    assert all(s.class_label == 0 for s in ccx if s.source_id.startswith("JCX/JPCNN"))


def test_scx_requires_manifest(tmp_path):
    make_scx(tmp_path, np.random.default_rng(0), extra=0, manifest=False)
    with pytest.raises(ManifestError):
        D.load_dataset(D.get_spec("SCX", tmp_path), size=16)


def test_manifest_errors(tmp_path, archive):
    shutil.copytree(archive / "MCX", tmp_path / "MCX")
    (tmp_path / "MCX" / "manifest.txt").write_text("MCUCXR_9999_0\t-\n")
    with pytest.raises(ManifestError):
        D.load_dataset(D.get_spec("MCX", tmp_path), size=16)
    (tmp_path / "MCX" / "manifest.txt").write_text("MCUCXR_0001_0\tholdout\n")
    with pytest.raises(ManifestError):
        D.load_dataset(D.get_spec("MCX", tmp_path), size=16)
    (tmp_path / "MCX" / "manifest.txt").unlink()
    (tmp_path / "MCX" / "images" / "MCUCXR_0001_0.png").unlink()
    with pytest.raises(ManifestError):
        D.load_dataset(D.get_spec("MCX", tmp_path), size=16)


def test_missing_root_and_unknown_dataset(monkeypatch):
    monkeypatch.delenv(D.DATA_ROOT_ENV, raising=False)
    with pytest.raises(DatasetError):
        D.load_dataset("MCX")
    with pytest.raises(ValueError):
        D.get_spec("XYZ")


def test_audit_manifest_selects_curated_counts(tmp_path):
    make_scx(tmp_path, np.random.default_rng(1), extra=13, manifest=False)
    entries = D.audit_manifest("SCX", tmp_path, size=16)
    assert len(entries) == 527
    assert Counter(D.class_from_name("SCX", s) for s in entries) == {0: 248, 1: 279}
    assert not any(int(s.split("_")[1]) > 527 for s in entries)      # empty-mask pairs dropped
    D.write_manifest(tmp_path / "SCX" / "manifest.txt", entries)
    parts = D.load_dataset(D.get_spec("SCX", tmp_path), size=16)
    assert tuple(len(p) for p in parts) == SPLIT_SIZES["SCX"]


def test_manifest_roundtrip(tmp_path):
    entries = {"b": "test", "a": None, "c": "train"}
    D.write_manifest(tmp_path / "m.txt", entries)
    assert (tmp_path / "m.txt").read_text() == "a\t-\nb\ttest\nc\ttrain\n"
    assert D.read_manifest(tmp_path / "m.txt") == entries


def test_jsrt_raw_reader(tmp_path):
    raw = (np.arange(16).reshape(4, 4) * 200).astype(">u2")
    raw.tofile(tmp_path / "a.IMG")
    np.testing.assert_array_equal(D.read_image(tmp_path / "a.IMG"), raw.astype(float))
    np.arange(15, dtype=">u2").tofile(tmp_path / "b.IMG")
    with pytest.raises(DatasetError):
        D.read_jsrt_raw(tmp_path / "b.IMG")


def test_class_from_name():
    assert D.class_from_name("MCX", "MCUCXR_0001_1") == 1
    assert D.class_from_name("JCX", "JPCNN010") == 0
    with pytest.raises(DatasetError):
        D.class_from_name("SCX", "CHNCXR_0001")


# ---------------------------------------------------------------- splits


def test_split_counts_rule():
    assert D.split_counts(200) == (135, 15, 50)
    for name in ("MCX", "SCX", "JCX"):
        assert D.split_counts(sum(SPLIT_SIZES[name])) == SPLIT_SIZES[name]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=4, max_size=60), st.integers(0, 10))
def test_stratified_split_partitions(labels, seed):
    samples = [D.Sample(np.zeros((2, 2), np.float32), None, c, f"s{i}") for i, c in enumerate(labels)]
    sizes = D.split_counts(len(samples))
    parts = D.stratified_split(samples, sizes, seed)
    assert tuple(len(p) for p in parts) == sizes
    ids = [s.source_id for p in parts for s in p]
    assert sorted(ids) == sorted(s.source_id for s in samples)
    # each split's class counts stay within one of the proportional quota
    total = Counter(labels)
    for p, size in zip(parts[1:], sizes[1:]):
        got = Counter(s.class_label for s in p)
        for c, n in total.items():
            assert abs(got.get(c, 0) - size * n / len(samples)) < 1 + 1e-9 or size == 0


# ---------------------------------------------------------------- preprocessing


def test_constant_image_warns_and_zeros():
    with pytest.warns(UserWarning):
        s = D.preprocess(np.full((20, 20), 7.0), size=16)
    assert not s.image.any()


def test_checkerboard_mask_resize():
    cells = np.indices((128, 128)).sum(0) % 2
    mask = np.kron(cells, np.ones((2, 2), np.uint8))      # 256x256, 2-pixel cells
    s = D.preprocess(np.random.default_rng(0).uniform(size=(256, 256)), mask, size=128)
    np.testing.assert_array_equal(s.mask, cells)


def test_preprocess_normalizes_and_keeps_binary_masks():
    rng = np.random.default_rng(0)
    img = rng.uniform(50, 900, size=(37, 53))
    mask = (rng.uniform(size=(37, 53)) > 0.5) * 255
    s = D.preprocess(img, mask, size=32)
    assert s.image.shape == (32, 32) and s.mask.shape == (32, 32)
    assert s.image.min() >= 0 and s.image.max() <= 1
    assert set(np.unique(s.mask)) <= {0, 1}
    same = D.preprocess(img, size=32)
    np.testing.assert_array_equal(same.image, s.image)
    exact = D.preprocess(np.array([[0.0, 2.0], [4.0, 8.0]]), size=2)
    np.testing.assert_allclose(exact.image, [[0, 0.25], [0.5, 1.0]])


def test_downsample_examples():
    ones = np.ones((8, 8), np.uint8)
    for f in (2, 4, 8):
        assert D.downsample_mask(ones, f).all()
    half = np.array([[1, 1], [0, 0]], np.uint8)
    assert D.downsample_mask(half, 2)[0, 0] == 1
    quarter = np.array([[1, 0], [0, 0]], np.uint8)
    assert D.downsample_mask(quarter, 2)[0, 0] == 0
    with pytest.raises(ValueError):
        D.downsample_mask(np.ones((6, 6)), 4)
    with pytest.raises(ValueError):
        D.downsample_mask(ones, 3)
    t = torch.ones(2, 1, 8, 8)
    assert isinstance(D.downsample_mask(t, 2), torch.Tensor)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16 - 1))
def test_downsample_matches_block_oracle_and_composes(bits):
    coarse = np.array([(bits >> i) & 1 for i in range(16)], np.uint8).reshape(4, 4)
    mask = np.kron(coarse, np.ones((4, 4), np.uint8))     # 16x16 made of 4x4 blocks
    for f in (2, 4, 8):
        np.testing.assert_array_equal(D.downsample_mask(mask, f), (block_mean(mask, f) >= 0.5).astype(np.uint8))
    np.testing.assert_array_equal(D.downsample_mask(D.downsample_mask(mask, 2), 2), D.downsample_mask(mask, 4))


# ---------------------------------------------------------------- synthetic data


def test_synth_hash_stable_and_seed_sensitive():
    a = D.dataset_hash(D.synth_dataset(40, 3, 32))
    assert a == D.dataset_hash(D.synth_dataset(40, 3, 32))
    assert a != D.dataset_hash(D.synth_dataset(40, 4, 32))


def test_synth_properties():
    samples = D.synth_dataset(200, 0, 64)
    labels = [s.class_label for s in samples]
    assert labels.count(1) == 100
    for s in samples:
        assert s.image.shape == (64, 64) and s.image.dtype == np.float32
        assert 0 <= s.image.min() and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0, 1}
        inside, outside = s.image[s.mask == 1].mean(), s.image[s.mask == 0].mean()
        assert inside < outside
    # the abnormal class carries bright pixels inside the lung field
    bright = [float(np.mean(s.image[s.mask == 1] > 0.7)) for s in samples]
    assert min(b for b, l in zip(bright, labels) if l == 1) > max(b for b, l in zip(bright, labels) if l == 0)
    with pytest.raises(ValueError):
        D.synth_dataset(4, 0, 48)


def test_synth_splits_sizes():
    parts = D.synth_splits(200, 0, 32)
    assert tuple(len(p) for p in parts) == (135, 15, 50)


def test_save_and_reload_synthetic(tmp_path):
    parts = D.synth_splits(24, 1, 32)
    D.save_dataset(dict(zip(D.SPLITS, parts)), tmp_path / "SYNTH")
    again = D.load_dataset(D.get_spec("SYNTH", tmp_path), size=32)
    for a, b in zip(parts, again):
        assert [s.source_id for s in a] == [s.source_id for s in b]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.mask, y.mask)
            assert x.class_label == y.class_label
            # 16-bit storage then per-image min-max renormalization
            lo, hi = x.image.min(), x.image.max()
            np.testing.assert_allclose(y.image, (x.image - lo) / (hi - lo), atol=1e-4)
    with Image.open(next((tmp_path / "SYNTH" / "images").iterdir())) as im:
        assert im.mode.startswith("I")


def test_to_tensors_marks_missing_annotations():
    s = D.synth_dataset(3, 0, 32)
    s[1] = D.Sample(s[1].image, None, None, "x")
    x, y, z = D.to_tensors(s)
    assert x.shape == (3, 1, 32, 32) and y.shape == (3, 1, 32, 32)
    assert z.tolist()[1] == -1 and not y[1].any()
