import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from idd.data_synth import (
    IGNORE,
    DatasetFormatError,
    DatasetSpec,
    generate_dataset,
    generate_sample,
    load_dataset,
    read_spec,
    save_dataset,
    split_ids,
    stack_samples,
)

SMALL = DatasetSpec(num_classes=4, height=24, width=20, train_count=12, val_count=4, seed=3)


def test_sample_shapes_and_ranges():
    s = generate_sample(SMALL, 0)
    assert s.image.shape == (3, 24, 20) and s.image.dtype == np.float32
    assert s.labels.shape == (24, 20) and s.labels.dtype == np.uint8
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0
    assert set(np.unique(s.labels)) <= set(range(4)) | {IGNORE}


def test_every_sample_has_foreground():
    for s in generate_dataset(SMALL, "train"):
        lab = s.labels
        assert ((lab > 0) & (lab != IGNORE)).any()


def test_order_independent_generation():
    forward = [generate_sample(SMALL, i) for i in range(6)]
    backward = [generate_sample(SMALL, i) for i in reversed(range(6))][::-1]
    assert forward == backward


def test_seed_changes_content():
    a = generate_sample(SMALL, 1)
    b = generate_sample(dataclasses.replace(SMALL, seed=4), 1)
    assert a != b


def test_splits_are_disjoint():
    train, val = split_ids(SMALL, "train"), split_ids(SMALL, "val")
    assert set(train).isdisjoint(val)
    assert len(train) == 12 and len(val) == 4
    with pytest.raises(ValueError):
        split_ids(SMALL, "test")


def test_ignore_fraction_is_respected():
    spec = dataclasses.replace(SMALL, ignore_fraction=0.05)
    frac = np.mean([np.mean(s.labels == IGNORE) for s in generate_dataset(spec, "train")])
    assert abs(frac - 0.05) < 0.01
    none = dataclasses.replace(SMALL, ignore_fraction=0.0)
    assert not any((s.labels == IGNORE).any() for s in generate_dataset(none, "train"))


def test_every_class_appears_in_a_default_sized_split():
    spec = DatasetSpec(train_count=100, val_count=0)
    labels = np.stack([s.labels for s in generate_dataset(spec, "train")])
    assert set(np.unique(labels)) == set(range(6)) | {IGNORE}


@pytest.mark.parametrize("kw", [dict(num_classes=1), dict(num_classes=256), dict(height=8),
                                dict(width=15), dict(seed=-1), dict(ignore_fraction=0.5),
                                dict(train_count=-2)])
def test_invalid_spec(kw):
    with pytest.raises(ValueError):
        dataclasses.replace(SMALL, **kw).validate()


def test_spec_dict_roundtrip():
    assert DatasetSpec.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(ValueError, match="unknown"):
        DatasetSpec.from_dict({**SMALL.to_dict(), "colour": 1})


def test_stack_samples():
    images, labels = stack_samples(generate_dataset(SMALL, "val"))
    assert images.shape == (4, 3, 24, 20) and labels.shape == (4, 24, 20)


def test_file_roundtrip(tmp_path):
    samples = generate_dataset(SMALL, "train")
    path = tmp_path / "d.idds"
    save_dataset(samples, path, SMALL)
    assert load_dataset(path) == samples
    assert load_dataset(path, num_classes=4) == samples
    assert read_spec(path) == SMALL


def test_class_count_mismatch_names_both(tmp_path):
    path = tmp_path / "d.idds"
    save_dataset(generate_dataset(SMALL, "val"), path, SMALL)
    with pytest.raises(DatasetFormatError, match="num_classes=4.*num_classes=6"):
        load_dataset(path, num_classes=6)


def test_corrupt_files(tmp_path):
    path = tmp_path / "d.idds"
    save_dataset(generate_dataset(SMALL, "val"), path, SMALL)
    raw = path.read_bytes()
    cases = {
        "trunc": raw[:-5],
        "magic": b"XXXX" + raw[4:],
        "version": raw[:4] + (99).to_bytes(4, "little") + raw[8:],
        "trailing": raw + b"\0",
        "empty": b"",
    }
    for name, data in cases.items():
        p = tmp_path / f"{name}.idds"
        p.write_bytes(data)
        with pytest.raises(DatasetFormatError):
            load_dataset(p)


def test_save_rejects_wrong_size(tmp_path):
    other = generate_sample(dataclasses.replace(SMALL, height=16), 0)
    with pytest.raises(ValueError):
        save_dataset([other], tmp_path / "x.idds", SMALL)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 40), sid=st.integers(0, 10 ** 6), n=st.integers(2, 12))
def test_generation_is_pure(seed, sid, n):
    spec = DatasetSpec(num_classes=n, height=16, width=16, seed=seed)
    a, b = generate_sample(spec, sid), generate_sample(spec, sid)
    assert a == b
    assert a.labels[a.labels != IGNORE].max() < n
