"""Dataset container, synthetic data generation, and sequence padding.

A dataset lives in a directory holding one raw little-endian float32 file per
tensor plus a ``manifest.json`` that records, per split, each tensor's file
name, shape, and dtype tag.  The format is deliberately minimal so that a
write/read cycle is bit-exact and any language can parse it.

Synthetic data substitutes for the CMU-MOSI/MOSEI feature sets at desk scale:
labels are uniform on [-3, 3] and each modality embeds the label along a
fixed random direction, corrupted by Gaussian noise and per-channel offsets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .errors import DataError, IntegrityError

STREAMS = ("text1", "text2", "audio", "vision")
SPLIT_NAMES = ("train", "valid", "test")
LABEL_RANGE = (-3.0, 3.0)
DEFAULT_SEQ_LEN = 50
DTYPE_TAG = "f32le"

MANIFEST_NAME = "manifest.json"


@dataclass
class RawModalityBatch:
    """Four per-sample feature sequences plus intensity labels.

    text1/text2/audio/vision: float tensors [N, L, d_m]; labels: [N].
    """

    text1: torch.Tensor
    text2: torch.Tensor
    audio: torch.Tensor
    vision: torch.Tensor
    labels: torch.Tensor

    @property
    def n_samples(self) -> int:
        return int(self.text1.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.text1.shape[1])

    @property
    def stream_dims(self) -> tuple[int, int, int, int]:
        return tuple(int(getattr(self, s).shape[2]) for s in STREAMS)

    def streams(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in STREAMS}

    def validate(self) -> None:
        n, length = self.n_samples, self.seq_len
        for name in STREAMS:
            t = getattr(self, name)
            if t.ndim != 3:
                raise DataError(f"{name} must be rank 3 [N, L, d], got shape {tuple(t.shape)}")
            if t.shape[0] != n or t.shape[1] != length:
                raise DataError(
                    f"{name} shape {tuple(t.shape)} disagrees with [N={n}, L={length}]"
                )
            if not torch.isfinite(t).all():
                raise DataError(f"{name} contains non-finite values")
        if self.labels.ndim != 1 or self.labels.shape[0] != n:
            raise DataError(f"labels must have shape [{n}], got {tuple(self.labels.shape)}")
        if not torch.isfinite(self.labels).all():
            raise DataError("labels contain non-finite values")
        lo, hi = LABEL_RANGE
        if bool((self.labels < lo).any()) or bool((self.labels > hi).any()):
            raise DataError(f"labels outside [{lo}, {hi}]")

    def subset(self, indices: torch.Tensor) -> "RawModalityBatch":
        return RawModalityBatch(
            text1=self.text1[indices],
            text2=self.text2[indices],
            audio=self.audio[indices],
            vision=self.vision[indices],
            labels=self.labels[indices],
        )

    def to(self, dtype: torch.dtype) -> "RawModalityBatch":
        return RawModalityBatch(
            text1=self.text1.to(dtype),
            text2=self.text2.to(dtype),
            audio=self.audio.to(dtype),
            vision=self.vision.to(dtype),
            labels=self.labels.to(dtype),
        )


@dataclass
class DatasetSplit:
    name: str
    batch: RawModalityBatch

    def __post_init__(self) -> None:
        if self.name not in SPLIT_NAMES:
            raise DataError(f"split name must be one of {SPLIT_NAMES}, got {self.name!r}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a label-recoverable multimodal batch.

    ``signal_strength`` holds one nonnegative scale per stream in the order
    (text1, text2, audio, vision); zero erases that stream's label signal.
    ``seed`` drives the per-sample draws (labels, noise) while
    ``direction_seed`` fixes the dataset-level geometry (signal directions,
    nuisance offsets) — splits of one dataset share the latter so that what
    is learned on train transfers to valid/test.
    """

    n_samples: int
    seq_len: int = DEFAULT_SEQ_LEN
    d_t1: int = 32
    d_t2: int = 32
    d_a: int = 74
    d_v: int = 35
    signal_strength: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    noise_std: float = 0.3
    seed: int = 0
    direction_seed: int = 0

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {self.seq_len}")
        for name in ("d_t1", "d_t2", "d_a", "d_v"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if len(self.signal_strength) != len(STREAMS):
            raise ValueError("signal_strength needs one entry per stream")
        if any(s < 0 for s in self.signal_strength):
            raise ValueError("signal_strength entries must be nonnegative")
        if self.noise_std <= 0:
            raise ValueError(f"noise_std must be > 0, got {self.noise_std}")

    @property
    def stream_dims(self) -> tuple[int, int, int, int]:
        return (self.d_t1, self.d_t2, self.d_a, self.d_v)


def default_synthetic_specs(
    n_train: int = 500, n_valid: int = 100
) -> dict[str, SyntheticSpec]:
    """The documented desk-scale stand-in: strong signal, distinct data seeds."""
    return {
        "train": SyntheticSpec(n_samples=n_train, seed=11),
        "valid": SyntheticSpec(n_samples=n_valid, seed=12),
    }


def generate_synthetic(spec: SyntheticSpec, name: str = "train") -> DatasetSplit:
    """Generate a split deterministically from ``spec`` (seed included).

    For each stream m: features = label * strength_m * direction_m
    broadcast over time, plus N(0, noise_std) noise and a per-channel
    nuisance offset drawn once per stream.
    """
    rng = np.random.default_rng(spec.seed)
    geometry_rng = np.random.default_rng(spec.direction_seed)
    lo, hi = LABEL_RANGE
    labels = rng.uniform(lo, hi, spec.n_samples)

    tensors = {}
    for stream, dim, strength in zip(STREAMS, spec.stream_dims, spec.signal_strength):
        direction = geometry_rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        offset = geometry_rng.normal(size=dim)
        noise = rng.normal(0.0, spec.noise_std, (spec.n_samples, spec.seq_len, dim))
        signal = labels[:, None, None] * strength * direction[None, None, :]
        tensors[stream] = torch.from_numpy((signal + noise + offset).astype(np.float32))

    batch = RawModalityBatch(
        labels=torch.from_numpy(labels.astype(np.float32)), **tensors
    )
    batch.validate()
    return DatasetSplit(name=name, batch=batch)


def pad_or_truncate(seq: torch.Tensor, length: int = DEFAULT_SEQ_LEN) -> torch.Tensor:
    """Fix the time axis of [N, T, d] to exactly ``length`` steps.

    Longer sequences keep their first ``length`` steps (downstream token
    extraction reads position 0, so the head of the sequence is what
    matters); shorter ones are zero-padded at the end.
    """
    if length <= 0:
        raise ValueError(f"length must be positive, got {length}")
    if seq.ndim != 3:
        raise DataError(f"expected [N, T, d], got shape {tuple(seq.shape)}")
    n, t, d = seq.shape
    if t >= length:
        return seq[:, :length, :]
    pad = seq.new_zeros((n, length - t, d))
    return torch.cat([seq, pad], dim=1)


def _tensor_entry(file_name: str, shape: tuple[int, ...]) -> dict:
    return {"file": file_name, "shape": list(shape), "dtype": DTYPE_TAG}


def write_container(split: DatasetSplit, path: str | Path) -> None:
    """Write one split into a container directory, creating or updating
    its manifest.  Existing entries for other splits are preserved."""
    split.batch.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    manifest_path = root / MANIFEST_NAME
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    else:
        manifest = {
            "byte_order": "little",
            "label_range": list(LABEL_RANGE),
            "splits": {},
        }

    entry: dict[str, dict] = {}
    tensors = dict(split.batch.streams())
    tensors["labels"] = split.batch.labels
    for name, tensor in tensors.items():
        file_name = f"{split.name}_{name}.f32"
        data = tensor.detach().cpu().to(torch.float32).numpy()
        data.astype("<f4", copy=False).tofile(root / file_name)
        entry[name] = _tensor_entry(file_name, tuple(data.shape))
    manifest["splits"][split.name] = entry
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")


def load_container(path: str | Path, split: str) -> DatasetSplit:
    """Load one split from a container directory, checking the manifest."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
    manifest = json.loads(manifest_path.read_text())

    splits = manifest.get("splits", {})
    if split not in splits:
        raise FileNotFoundError(f"split {split!r} not present in {manifest_path}")
    entry = splits[split]

    tensors: dict[str, torch.Tensor] = {}
    for name in (*STREAMS, "labels"):
        if name not in entry:
            raise IntegrityError(f"manifest entry for split {split!r} lacks {name!r}")
        meta = entry[name]
        if meta.get("dtype") != DTYPE_TAG:
            raise IntegrityError(
                f"{name}: unsupported dtype tag {meta.get('dtype')!r}, expected {DTYPE_TAG!r}"
            )
        file_path = root / meta["file"]
        if not file_path.exists():
            raise FileNotFoundError(f"missing tensor file {file_path}")
        shape = tuple(int(s) for s in meta["shape"])
        expected_bytes = 4 * math.prod(shape)
        actual_bytes = file_path.stat().st_size
        if actual_bytes != expected_bytes:
            raise IntegrityError(
                f"{file_path.name}: manifest shape {shape} needs {expected_bytes} bytes, "
                f"file holds {actual_bytes}"
            )
        data = np.fromfile(file_path, dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(data)

    batch = RawModalityBatch(
        text1=tensors["text1"],
        text2=tensors["text2"],
        audio=tensors["audio"],
        vision=tensors["vision"],
        labels=tensors["labels"],
    )
    batch.validate()
    return DatasetSplit(name=split, batch=batch)
