import struct

import numpy as np
import pytest

from otrobust.datasets import (Dataset, SyntheticSpec, generate_synthetic,
                               load_csv_regression, load_idx, load_idx_images,
                               read_dataset, split_dataset, stratified_subset,
                               write_dataset, write_idx_images, write_idx_labels)
from otrobust.errors import ConfigError, DataFormatError


def test_synthetic_shapes_and_determinism():
    spec = SyntheticSpec(dim=16, num_classes=3, class_std=0.2,
                         train_count=90, test_count=30, rng_seed=5)
    tr1, te1 = generate_synthetic(spec)
    tr2, te2 = generate_synthetic(spec)
    assert tr1.x.shape == (90, 16) and te1.x.shape == (30, 16)
    assert tr1.num_classes == 3
    np.testing.assert_array_equal(tr1.x, tr2.x)
    np.testing.assert_array_equal(te1.y, te2.y)


def test_synthetic_class_means_on_unit_sphere():
    spec = SyntheticSpec(dim=8, num_classes=4, class_std=0.0,
                         train_count=40, test_count=8, rng_seed=1)
    tr, _ = generate_synthetic(spec)
    # std=0 collapses every sample onto its class mean
    for c in range(4):
        pts = tr.x[tr.y == c]
        assert np.ptp(pts, axis=0).max() == 0.0
        assert abs(np.linalg.norm(pts[0]) - 1.0) < 1e-12


def test_synthetic_all_classes_present_both_splits():
    tr, te = generate_synthetic(SyntheticSpec(dim=4, num_classes=5, class_std=0.1,
                                              train_count=50, test_count=25, rng_seed=0))
    assert set(tr.y) == set(range(5)) == set(te.y)


@pytest.mark.parametrize("bad", [
    dict(dim=1), dict(num_classes=0), dict(train_count=0),
    dict(test_count=0), dict(class_std=-0.1),
])
def test_synthetic_invalid_spec(bad):
    with pytest.raises(ConfigError):
        SyntheticSpec(**bad)


def _hand_idx_images(path):
    # 4 images of 2x2, pixel value = running index * 16
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", 0x00000803, 4, 2, 2))
        f.write(bytes(range(0, 256, 16)))


def test_idx_hand_fixture_roundtrip(tmp_path):
    img_p, lab_p = tmp_path / "img.idx", tmp_path / "lab.idx"
    _hand_idx_images(img_p)
    with open(lab_p, "wb") as f:
        f.write(struct.pack(">ii", 0x00000801, 4))
        f.write(bytes([0, 1, 2, 3]))
    ds = load_idx(img_p, lab_p)
    assert ds.dim == 4 and len(ds) == 4 and ds.num_classes == 4
    np.testing.assert_array_equal(ds.y, [0, 1, 2, 3])
    # first image pixels 0,16,32,48 scaled by /255
    np.testing.assert_allclose(ds.x[0], np.array([0, 16, 32, 48]) / 255.0)
    assert ds.x[3, 3] == pytest.approx(240 / 255.0)


def test_idx_pixel_255_maps_to_one(tmp_path):
    p = tmp_path / "one.idx"
    write_idx_images(p, np.array([[[255]]], dtype=np.uint8), 1, 1)
    assert load_idx_images(p)[0, 0] == 1.0


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "bad.idx"
    with open(p, "wb") as f:
        f.write(struct.pack(">iiii", 0x00000777, 1, 2, 2) + b"\x00" * 4)
    with pytest.raises(DataFormatError):
        load_idx_images(p)


def test_idx_truncated_and_empty(tmp_path):
    p = tmp_path / "trunc.idx"
    with open(p, "wb") as f:
        f.write(struct.pack(">iiii", 0x00000803, 4, 2, 2) + b"\x00" * 7)
    with pytest.raises(DataFormatError):
        load_idx_images(p)
    empty = tmp_path / "empty.idx"
    empty.write_bytes(b"")
    with pytest.raises(DataFormatError):
        load_idx_images(empty)


def test_idx_count_mismatch(tmp_path):
    img_p, lab_p = tmp_path / "img.idx", tmp_path / "lab.idx"
    _hand_idx_images(img_p)
    write_idx_labels(lab_p, np.array([0, 1, 2], dtype=np.uint8))
    with pytest.raises(DataFormatError):
        load_idx(img_p, lab_p)


def test_idx_writer_reader_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(10, 3, 4)).astype(np.uint8)
    labs = rng.integers(0, 7, size=10).astype(np.uint8)
    write_idx_images(tmp_path / "i.idx", imgs, 3, 4)
    write_idx_labels(tmp_path / "l.idx", labs)
    ds = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    np.testing.assert_allclose(ds.x, imgs.reshape(10, -1) / 255.0)
    np.testing.assert_array_equal(ds.y, labs)


WINE_STYLE = """fixed;volatile;quality
7.4;0.70;5
7.8;0.88;5
11.2;0.28;6
"""


def test_csv_semicolon_fixture_parsed_exactly(tmp_path):
    p = tmp_path / "wine.csv"
    p.write_text(WINE_STYLE)
    ds = load_csv_regression(p, delimiter=";", target_column="quality")
    assert ds.task == "regression" and ds.dim == 2 and len(ds) == 3
    # features z-scored with training statistics, target untouched
    col = np.array([7.4, 7.8, 11.2])
    np.testing.assert_allclose(ds.x[:, 0], (col - col.mean()) / col.std(),
                               atol=1e-12)
    np.testing.assert_array_equal(ds.y.ravel(), [5.0, 5.0, 6.0])


def test_csv_single_row_variance_floor(tmp_path):
    p = tmp_path / "single.csv"
    p.write_text("a,b,target\n1.5,2.5,3.0\n")
    ds = load_csv_regression(p)
    # zero-variance columns collapse to 0 under the epsilon floor
    np.testing.assert_array_equal(ds.x, [[0.0, 0.0]])
    assert ds.y[0, 0] == 3.0


def test_csv_missing_target_and_bad_cell(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(DataFormatError):
        load_csv_regression(p, target_column="quality")
    p.write_text("a,target\nnot_a_number,2\n")
    with pytest.raises(DataFormatError):
        load_csv_regression(p)


def test_dataset_cache_roundtrip_bit_exact(tmp_path):
    tr, _ = generate_synthetic(SyntheticSpec(dim=6, num_classes=2, class_std=0.3,
                                             train_count=20, test_count=4, rng_seed=2))
    path = tmp_path / "ds.bin"
    write_dataset(path, tr)
    back = read_dataset(path)
    assert back.task == tr.task and back.name == tr.name
    assert back.x.tobytes() == tr.x.tobytes()
    assert back.y.tobytes() == tr.y.tobytes()
    # second write is byte-identical (no timestamps, no nondeterminism)
    write_dataset(tmp_path / "ds2.bin", tr)
    assert (tmp_path / "ds.bin").read_bytes() == (tmp_path / "ds2.bin").read_bytes()


def test_dataset_cache_regression_roundtrip(tmp_path):
    ds = Dataset(x=np.arange(8.0).reshape(4, 2), y=np.array([1.0, 2.0, 3.0, 4.0]),
                 task="regression", name="toy")
    write_dataset(tmp_path / "r.bin", ds)
    back = read_dataset(tmp_path / "r.bin")
    assert back.y.shape == (4, 1)
    np.testing.assert_array_equal(back.x, ds.x)


def test_dataset_validation():
    with pytest.raises(ConfigError):
        Dataset(x=np.zeros((3, 2)), y=np.zeros(3), task="nonsense")
    with pytest.raises(DataFormatError):
        Dataset(x=np.zeros((0, 2)), y=np.zeros(0), task="classification",
                num_classes=2)
    with pytest.raises(DataFormatError):
        Dataset(x=np.zeros((2, 2)), y=np.array([0, 5]), task="classification",
                num_classes=2)


def test_split_dataset_disjoint_and_complete():
    tr, _ = generate_synthetic(SyntheticSpec(dim=4, num_classes=2, class_std=0.2,
                                             train_count=50, test_count=10, rng_seed=3))
    a, b = split_dataset(tr, 0.2, seed=0)
    assert len(a) == 40 and len(b) == 10
    merged = np.vstack([a.x, b.x])
    assert {tuple(r) for r in merged} == {tuple(r) for r in tr.x}


def test_stratified_subset_counts_within_one():
    tr, _ = generate_synthetic(SyntheticSpec(dim=4, num_classes=3, class_std=0.2,
                                             train_count=90, test_count=9, rng_seed=4))
    sub = stratified_subset(tr, 40, seed=0)
    counts = np.bincount(sub.y, minlength=3)
    assert len(sub) == 40
    assert counts.max() - counts.min() <= 1
    with pytest.raises(ConfigError):
        stratified_subset(tr, 91, seed=0)
