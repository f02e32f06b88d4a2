"""Model and training configuration.

``ModelConfig`` fixes the architecture (stream dims, model width, head and
layer counts), ``TrainConfig`` adds the optimization and loss weights plus
every switch the ablation harness toggles.  Both validate eagerly so a bad
combination fails before any tensor is allocated.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError

ACC2_MODES = ("exclude_zero", "nonneg_vs_neg")


@dataclass(frozen=True)
class ModelConfig:
    """Architectural hyperparameters of the fusion network."""

    d_t1: int = 32
    d_t2: int = 32
    d_a: int = 74
    d_v: int = 35
    d_model: int = 50
    n_heads: int = 5
    ffn_mult: int = 4
    cmt_layers: int = 2
    kernel_size: int = 1
    dropout: float = 0.1
    d_align: int = 32
    normalize_alignment: bool = True
    positional_encoding: bool = False
    use_homogeneous: bool = False

    def __post_init__(self) -> None:
        for name in ("d_t1", "d_t2", "d_a", "d_v", "d_model", "d_align"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_heads < 1:
            raise ConfigError(f"n_heads must be positive, got {self.n_heads}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.ffn_mult < 1:
            raise ConfigError(f"ffn_mult must be >= 1, got {self.ffn_mult}")
        if self.cmt_layers < 1:
            raise ConfigError(f"cmt_layers must be >= 1, got {self.cmt_layers}")
        if self.kernel_size < 1:
            raise ConfigError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def stream_dims(self) -> tuple[int, int, int, int]:
        return (self.d_t1, self.d_t2, self.d_a, self.d_v)

    @property
    def head_in_dim(self) -> int:
        """Width of the prediction-head input: four tokens, plus the pooled
        homogeneous vector when that stream is enabled."""
        extra = self.d_model if self.use_homogeneous else 0
        return 4 * self.d_model + extra


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on besides the data itself."""

    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 100
    seed: int = 101
    omega: float = 0.1
    alpha: float = 1.0
    tau: float = 0.07
    norm_p: int = 1
    d_model: int = 50
    d_align: int = 32
    cmt_layers: int = 2
    n_heads: int = 5
    ffn_mult: int = 4
    kernel_size: int = 1
    dropout: float = 0.1
    normalize_alignment: bool = True
    positional_encoding: bool = False
    use_homogeneous: bool = False
    contrastive_alignment: bool = True
    norm_alignment: bool = True
    acc2_mode: str = "exclude_zero"
    early_stop_patience: Optional[int] = None
    grad_clip: Optional[float] = None

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.omega < 0:
            raise ConfigError(f"omega must be >= 0, got {self.omega}")
        if self.norm_p not in (1, 2):
            raise ConfigError(f"norm_p must be 1 or 2, got {self.norm_p}")
        if self.acc2_mode not in ACC2_MODES:
            raise ConfigError(
                f"acc2_mode must be one of {ACC2_MODES}, got {self.acc2_mode!r}"
            )
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1 when set")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be > 0 when set")

    def model_config(self, stream_dims: tuple[int, int, int, int]) -> ModelConfig:
        """Bind the architectural fields to the raw feature widths of a dataset."""
        d_t1, d_t2, d_a, d_v = stream_dims
        return ModelConfig(
            d_t1=d_t1,
            d_t2=d_t2,
            d_a=d_a,
            d_v=d_v,
            d_model=self.d_model,
            n_heads=self.n_heads,
            ffn_mult=self.ffn_mult,
            cmt_layers=self.cmt_layers,
            kernel_size=self.kernel_size,
            dropout=self.dropout,
            d_align=self.d_align,
            normalize_alignment=self.normalize_alignment,
            positional_encoding=self.positional_encoding,
            use_homogeneous=self.use_homogeneous,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**values)
