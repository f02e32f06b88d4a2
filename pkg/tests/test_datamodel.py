import json

import numpy as np
import pytest
import torch

from miar.datamodel import (
    STREAMS,
    DatasetSplit,
    RawModalityBatch,
    SyntheticSpec,
    generate_synthetic,
    load_container,
    pad_or_truncate,
    write_container,
)
from miar.errors import DataError, IntegrityError


def small_spec(**overrides):
    defaults = dict(n_samples=3, seq_len=5, d_t1=4, d_t2=3, d_a=6, d_v=2, seed=9)
    defaults.update(overrides)
    return SyntheticSpec(**defaults)


# ---------------------------------------------------------------- generation


def test_generate_is_deterministic():
    spec = small_spec(n_samples=100, seed=7)
    a = generate_synthetic(spec)
    b = generate_synthetic(spec)
    for name in STREAMS:
        assert torch.equal(getattr(a.batch, name), getattr(b.batch, name))
    assert torch.equal(a.batch.labels, b.batch.labels)


def test_generate_labels_in_range():
    batch = generate_synthetic(small_spec(n_samples=100)).batch
    assert batch.labels.min() >= -3.0
    assert batch.labels.max() <= 3.0


def test_generate_shapes_match_spec():
    spec = small_spec()
    batch = generate_synthetic(spec).batch
    assert batch.text1.shape == (3, 5, 4)
    assert batch.text2.shape == (3, 5, 3)
    assert batch.audio.shape == (3, 5, 6)
    assert batch.vision.shape == (3, 5, 2)
    assert batch.labels.shape == (3,)


def test_zero_signal_has_no_label_correlation():
    # oracle: Pearson r computed directly on the generated data
    spec = SyntheticSpec(
        n_samples=500, seq_len=20, signal_strength=(0.0, 0.0, 0.0, 0.0), seed=21
    )
    split = generate_synthetic(spec)
    labels = split.batch.labels.numpy()
    for name in STREAMS:
        channel_means = getattr(split.batch, name).numpy().mean(axis=1)  # [N, d]
        for col in range(channel_means.shape[1]):
            r = np.corrcoef(channel_means[:, col], labels)[0, 1]
            assert abs(r) < 0.3, f"{name}[{col}] correlates with labels: r={r}"


def test_splits_share_geometry_but_not_samples():
    a = generate_synthetic(small_spec(n_samples=50, seed=1)).batch
    b = generate_synthetic(small_spec(n_samples=50, seed=2)).batch
    assert not torch.equal(a.labels, b.labels)
    # same direction/offset geometry: per-channel means agree closely
    mean_a = a.audio.mean(dim=(0, 1))
    mean_b = b.audio.mean(dim=(0, 1))
    assert torch.allclose(mean_a, mean_b, atol=0.5)


def test_spec_rejects_bad_arguments():
    with pytest.raises(ValueError):
        small_spec(n_samples=0)
    with pytest.raises(ValueError):
        small_spec(noise_std=0.0)
    with pytest.raises(ValueError):
        small_spec(signal_strength=(1.0, 1.0, -0.1, 1.0))


# ------------------------------------------------------------------- padding


def test_pad_or_truncate_identity():
    x = torch.randn(2, 50, 3)
    assert torch.equal(pad_or_truncate(x, 50), x)


def test_pad_appends_zero_rows():
    x = torch.randn(2, 3, 4)
    out = pad_or_truncate(x, 5)
    assert out.shape == (2, 5, 4)
    assert torch.equal(out[:, :3], x)
    assert torch.equal(out[:, 3:], torch.zeros(2, 2, 4))


def test_truncate_keeps_head():
    x = torch.randn(2, 7, 4)
    out = pad_or_truncate(x, 5)
    assert torch.equal(out, x[:, :5])


@pytest.mark.parametrize("t", [1, 4, 9, 17])
def test_pad_or_truncate_length_contract(t):
    x = torch.randn(3, t, 2)
    out = pad_or_truncate(x, 9)
    assert out.shape == (3, 9, 2)
    keep = min(t, 9)
    assert torch.equal(out[:, :keep], x[:, :keep])


def test_pad_or_truncate_rejects_bad_length():
    with pytest.raises(ValueError):
        pad_or_truncate(torch.randn(1, 2, 3), 0)


# ----------------------------------------------------------------- container


def test_container_round_trip_is_bitwise(tmp_path):
    split = generate_synthetic(small_spec(), name="train")
    write_container(split, tmp_path)
    loaded = load_container(tmp_path, "train")
    for name in (*STREAMS, "labels"):
        assert torch.equal(getattr(loaded.batch, name), getattr(split.batch, name))


def test_container_holds_multiple_splits(tmp_path):
    write_container(generate_synthetic(small_spec(seed=1), name="train"), tmp_path)
    write_container(generate_synthetic(small_spec(seed=2), name="valid"), tmp_path)
    train = load_container(tmp_path, "train")
    valid = load_container(tmp_path, "valid")
    assert train.name == "train" and valid.name == "valid"
    assert not torch.equal(train.batch.labels, valid.batch.labels)


def test_manifest_records_shapes(tmp_path):
    split = generate_synthetic(small_spec(n_samples=3, seq_len=50, d_v=35), name="train")
    write_container(split, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    entry = manifest["splits"]["train"]["vision"]
    assert entry["shape"] == [3, 50, 35]
    assert entry["dtype"] == "f32le"


def test_write_rejects_nan_label(tmp_path):
    split = generate_synthetic(small_spec(), name="train")
    split.batch.labels[0] = float("nan")
    with pytest.raises(DataError):
        write_container(split, tmp_path)


def test_load_detects_shape_mismatch(tmp_path):
    split = generate_synthetic(small_spec(), name="train")
    write_container(split, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    # claim one more sample than the file holds
    manifest["splits"]["train"]["audio"]["shape"][0] += 1
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IntegrityError):
        load_container(tmp_path, "train")


def test_load_missing_file(tmp_path):
    split = generate_synthetic(small_spec(), name="train")
    write_container(split, tmp_path)
    (tmp_path / "train_audio.f32").unlink()
    with pytest.raises(FileNotFoundError):
        load_container(tmp_path, "train")


def test_load_missing_split(tmp_path):
    write_container(generate_synthetic(small_spec(), name="train"), tmp_path)
    with pytest.raises(FileNotFoundError):
        load_container(tmp_path, "valid")


def test_load_rejects_non_finite_values(tmp_path):
    split = generate_synthetic(small_spec(), name="train")
    write_container(split, tmp_path)
    bad = np.fromfile(tmp_path / "train_vision.f32", dtype="<f4")
    bad[0] = np.inf
    bad.tofile(tmp_path / "train_vision.f32")
    with pytest.raises(DataError):
        load_container(tmp_path, "train")


def test_split_name_validated():
    batch = generate_synthetic(small_spec()).batch
    with pytest.raises(DataError):
        DatasetSplit(name="training", batch=batch)


def test_batch_validate_rejects_mismatched_lengths():
    batch = generate_synthetic(small_spec()).batch
    bad = RawModalityBatch(
        text1=batch.text1,
        text2=batch.text2,
        audio=batch.audio[:, :-1],
        vision=batch.vision,
        labels=batch.labels,
    )
    with pytest.raises(DataError):
        bad.validate()
