import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from advpurify import container
from advpurify.data import (
    SyntheticSpec,
    blob_touches_window,
    generate_synthetic,
    label_from_blobs,
    load_dataset,
    save_dataset,
    split_dataset,
)
from advpurify.errors import CheckpointVersionError, CorruptCheckpointError


def test_centre_blob_is_positive():
    assert blob_touches_window(16, 16, 2, 32, 10)
    assert label_from_blobs(np.array([[16, 16, 2]]), 32, 10) == 1


def test_corner_blob_is_negative():
    assert not blob_touches_window(3, 3, 2, 32, 10)
    assert label_from_blobs(np.array([[3, 3, 2], [-1, -1, -1]]), 32, 10) == 0


def test_edge_contact_counts():
    # window rows/cols are 11..20; a radius-2 disk centred at col 9 reaches col 11
    assert blob_touches_window(15, 9, 2, 32, 10)
    assert not blob_touches_window(15, 8, 2, 32, 10)


def test_exact_balance():
    ds = generate_synthetic(SyntheticSpec(n_samples=1000, seed=3))
    assert (ds.labels == 1).sum() == 500 and (ds.labels == 0).sum() == 500


def test_label_rule_soundness(small_dataset):
    spec = small_dataset.spec
    derived = [label_from_blobs(b, spec.image_size, spec.center_size) for b in small_dataset.blobs]
    assert np.array_equal(np.array(derived), small_dataset.labels)


def test_images_in_range_and_deterministic(small_dataset):
    x, y = small_dataset.tensors()
    assert x.dtype == torch.float64 and x.shape == (400, 1, 32, 32)
    assert x.min() >= 0 and x.max() <= 1
    again = generate_synthetic(small_dataset.spec)
    assert np.array_equal(again.images, small_dataset.images)
    other = generate_synthetic(dataclasses.replace(small_dataset.spec, seed=12))
    assert not np.array_equal(other.images, small_dataset.images)


def test_positive_images_are_brighter_in_window(small_dataset):
    x, y = small_dataset.tensors()
    centre = x[:, 0, 11:21, 11:21].amax(dim=(1, 2))
    assert centre[y == 1].mean() > centre[y == 0].mean() + 0.1


@pytest.mark.parametrize("kwargs", [dict(n_samples=3), dict(n_samples=0), dict(center_size=32),
                                    dict(radius_min=0), dict(radius_min=3, radius_max=2),
                                    dict(radius_max=9), dict(amplitude_min=0.0)])
def test_invalid_specs_rejected(kwargs):
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(**kwargs))


def test_infeasible_negative_placement_rejected():
    # a 12px window in a 16px image leaves only a 2px border: radius 2 cannot sit outside it
    with pytest.raises(ValueError, match="outside"):
        SyntheticSpec(image_size=16, center_size=12, radius_min=2, radius_max=2).validate()


def test_split_sizes():
    s = split_dataset(10, (0.8, 0.1, 0.1), seed=0)
    assert (len(s.train), len(s.val), len(s.test)) == (8, 1, 1)


def test_split_is_deterministic():
    a, b = split_dataset(100, seed=4), split_dataset(100, seed=4)
    assert all(np.array_equal(getattr(a, f), getattr(b, f)) for f in ("train", "val", "test"))


@given(n=st.integers(20, 500), seed=st.integers(0, 1000), f=st.floats(0.1, 0.8))
def test_split_is_a_partition(n, seed, f):
    rest = (1 - f) / 2
    s = split_dataset(n, (f, rest, 1 - f - rest), seed)
    joined = np.concatenate([s.train, s.val, s.test])
    assert sorted(joined.tolist()) == list(range(n))


@pytest.mark.parametrize("args", [(10, (0.9, 0.1, 0.0)), (2, (0.5, 0.25, 0.25)), (10, (0.5, 0.5, 0.5))])
def test_split_rejects_empty_or_bad_fractions(args):
    with pytest.raises(ValueError):
        split_dataset(*args)


def test_dataset_file_round_trip(tmp_path, small_dataset):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_dataset(small_dataset, p1)
    loaded = load_dataset(p1)
    assert loaded.spec == small_dataset.spec
    assert np.array_equal(loaded.images, small_dataset.images)
    assert np.array_equal(loaded.labels, small_dataset.labels)
    save_dataset(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_dataset_file_bytes_determined_by_spec(tmp_path):
    spec = SyntheticSpec(n_samples=20, seed=5)
    save_dataset(generate_synthetic(spec), tmp_path / "a.bin")
    save_dataset(generate_synthetic(spec), tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_container_detects_truncation_and_version(tmp_path):
    path = tmp_path / "c.bin"
    container.write(path, {"kind": "x"}, {"a": np.arange(10, dtype=np.float32)})
    blob = path.read_bytes()
    with pytest.raises(CorruptCheckpointError):
        container.decode(blob[:-5])
    with pytest.raises(CorruptCheckpointError):
        container.decode(blob[:10])
    with pytest.raises(CorruptCheckpointError):
        container.decode(b"NOTMAGIC" + blob[8:])
    bumped = bytearray(blob)
    bumped[8] = 99
    with pytest.raises(CheckpointVersionError):
        container.decode(bytes(bumped))
    meta, arrays = container.decode(blob)
    assert meta == {"kind": "x"} and np.array_equal(arrays["a"], np.arange(10, dtype=np.float32))
