import struct

import numpy as np
import pytest

from dualattn.errors import FormatError, RejectedInput
from dualattn.synthdata import MIN_MASK_AREA, Dataset, DatasetSpec, generate, load, save


@pytest.fixture(scope="module")
def small():
    return generate(DatasetSpec(count=200, pos_frac=0.5, seed=7))


def test_exact_positive_count(small):
    assert len(small) == 200
    assert int(small.labels.sum()) == 100


def test_shapes_and_ranges(small):
    assert small.images.shape == (200, 64, 64) and small.images.dtype == np.float32
    assert small.images.min() >= 0.0 and small.images.max() <= 1.0
    assert set(np.unique(small.masks)) <= {0, 1}


def test_masks_follow_labels(small):
    areas = small.masks.reshape(200, -1).sum(axis=1)
    assert np.all(areas[small.labels == 0] == 0)
    assert np.all(areas[small.labels == 1] >= MIN_MASK_AREA)


def test_determinism(small):
    again = generate(DatasetSpec(count=200, pos_frac=0.5, seed=7))
    assert small.equals(again)
    other = generate(DatasetSpec(count=200, pos_frac=0.5, seed=8))
    assert not small.equals(other)


def test_sample_independent_of_count():
    # per-sample seeds are counter-derived, so a sample's image does not depend on dataset size
    a = generate(DatasetSpec(count=10, seed=3))
    b = generate(DatasetSpec(count=20, seed=3))
    for i in range(10):
        if a.labels[i] == b.labels[i]:
            assert np.array_equal(a.images[i], b.images[i])


def test_noiseless_blob_is_exact():
    spec = DatasetSpec(count=20, pos_frac=0.5, intensity_min=1.0, intensity_max=1.0, texture=0.0, noise=0.0, seed=1)
    ds = generate(spec)
    for i in np.flatnonzero(ds.labels == 1):
        assert np.array_equal(ds.masks[i], (ds.images[i] >= 0.5).astype(np.uint8))
        assert ds.images[i].max() <= 1.0 and ds.images[i].max() > 0.9
    for i in np.flatnonzero(ds.labels == 0):
        assert not ds.images[i].any()


def test_positives_are_brighter_inside_mask(small):
    pos = np.flatnonzero(small.labels == 1)
    inside = np.mean([small.images[i][small.masks[i] > 0].mean() for i in pos])
    outside = np.mean([small.images[i][small.masks[i] == 0].mean() for i in pos])
    assert inside > outside + 0.3


@pytest.mark.parametrize(
    "kwargs",
    [
        {"pos_frac": 0.0},
        {"pos_frac": 1.0},
        {"count": -1},
        {"radius_min": 10.0, "radius_max": 9.0},
        {"radius_min": 2.0, "radius_max": 4.0},  # area below the minimum
        {"radius_max": 40.0},
        {"intensity_min": 0.0},
        {"noise": -0.1},
    ],
)
def test_infeasible_specs_rejected(kwargs):
    with pytest.raises(RejectedInput):
        generate(DatasetSpec(**{"count": 4, **kwargs}))


def test_roundtrip(tmp_path, small):
    path = tmp_path / "d.cads"
    save(small, path)
    assert load(path).equals(small)
    first = path.read_bytes()
    save(load(path), path)
    assert path.read_bytes() == first


def test_split_is_disjoint(small):
    a, b = small.split(150)
    assert len(a) == 150 and len(b) == 50
    assert np.array_equal(np.concatenate([a.images, b.images]), small.images)


def test_empty_dataset_roundtrip(tmp_path):
    path = tmp_path / "e.cads"
    save(Dataset.empty(), path)
    back = load(path)
    assert len(back) == 0
    assert struct.unpack_from("<I", path.read_bytes(), 8)[0] == 0


def test_corrupt_magic(tmp_path, small):
    path = tmp_path / "d.cads"
    save(small.subset(slice(0, 3)), path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load(path)


def test_truncation_and_checksum(tmp_path, small):
    path = tmp_path / "d.cads"
    save(small.subset(slice(0, 3)), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(FormatError, match="truncated"):
        load(path)
    flipped = bytearray(raw)
    flipped[100] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(FormatError, match="checksum"):
        load(path)


def test_version_mismatch(tmp_path, small):
    path = tmp_path / "d.cads"
    save(small.subset(slice(0, 1)), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        load(path)
