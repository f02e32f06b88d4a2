"""Per-stream projection of raw features to the shared model width.

Each stream gets its own Conv1d (kernel size 1 by default, so each time step
is an affine map of the same time step).  An optional homogeneous path runs
one shared-weight Conv1d over all four projected streams; it captures what
the modalities have in common and only feeds the prediction head.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn

from .config import ModelConfig
from .datamodel import STREAMS, RawModalityBatch
from .errors import ShapeError


def project_stream(raw: torch.Tensor, conv: nn.Conv1d) -> torch.Tensor:
    """Apply one stream's convolution to [N, L, d_in], returning [N, L, d_out].

    The time axis is preserved ('same' padding for kernels wider than 1).
    """
    if raw.ndim != 3:
        raise ShapeError(f"expected [N, L, d], got shape {tuple(raw.shape)}")
    if raw.shape[-1] != conv.in_channels:
        raise ShapeError(
            f"stream width {raw.shape[-1]} does not match kernel input "
            f"channels {conv.in_channels}"
        )
    return conv(raw.transpose(1, 2)).transpose(1, 2)


def sinusoidal_encoding(length: int, d_model: int, dtype: torch.dtype) -> torch.Tensor:
    """Classic fixed sin/cos position table of shape [length, d_model]."""
    position = torch.arange(length, dtype=dtype).unsqueeze(1)
    div_term = torch.exp(
        torch.arange(0, d_model, 2, dtype=dtype) * (-math.log(10000.0) / d_model)
    )
    table = torch.zeros(length, d_model, dtype=dtype)
    table[:, 0::2] = torch.sin(position * div_term)
    table[:, 1::2] = torch.cos(position * div_term[: table[:, 1::2].shape[1]])
    return table


class ModalityProjector(nn.Module):
    """Four heterogeneous Conv1d mappers plus the optional shared encoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        pad = "same" if config.kernel_size > 1 else 0
        self.convs = nn.ModuleDict(
            {
                name: nn.Conv1d(dim, config.d_model, config.kernel_size, padding=pad)
                for name, dim in zip(STREAMS, config.stream_dims)
            }
        )
        if config.use_homogeneous:
            # One instance, applied to every stream: the sharing is the point.
            self.homogeneous = nn.Conv1d(
                config.d_model, config.d_model, config.kernel_size, padding=pad
            )
        else:
            self.homogeneous = None

    def forward(self, batch: RawModalityBatch) -> dict[str, torch.Tensor]:
        """Project all four streams; returns {stream: [N, L, d_model]}."""
        projected = {
            name: project_stream(getattr(batch, name), self.convs[name])
            for name in STREAMS
        }
        if self.config.positional_encoding:
            any_stream = next(iter(projected.values()))
            table = sinusoidal_encoding(
                any_stream.shape[1], self.config.d_model, any_stream.dtype
            )
            projected = {name: seq + table for name, seq in projected.items()}
        return projected

    def homogeneous_summary(self, projected: dict[str, torch.Tensor]) -> torch.Tensor:
        """Shared-weight pass over each projected stream, pooled over time and
        averaged over modalities into one [N, d_model] vector."""
        if self.homogeneous is None:
            raise ShapeError("homogeneous stream is disabled in this configuration")
        pooled = [
            project_stream(projected[name], self.homogeneous).mean(dim=1)
            for name in STREAMS
        ]
        return torch.stack(pooled, dim=0).mean(dim=0)
