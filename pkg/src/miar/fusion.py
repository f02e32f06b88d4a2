"""Cross-modality fusion networks and the end-to-end model.

Each of the four streams owns a fusion network: two stacks of cross-attention
blocks (queries from the owning stream, keys/values from two other streams),
a learned two-channel 1x1 merge of the branch outputs, a self-attention
aggregation pass, and extraction of the position-0 vector as that stream's
token.  For the audio and video networks the text side is the element-wise
mean of the two projected text streams.

``MiarModel`` wires projection -> four fusion networks -> alignment MLPs and
prediction head.  Forward passes are pure given parameters; dropout only
fires when a seeded generator is passed in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import torch
from torch import nn

from .alignment import AlignmentProjector
from .attention import MhaBlock
from .config import ModelConfig
from .datamodel import RawModalityBatch
from .errors import ConfigError, ShapeError
from .objective_metrics import PredictionHead
from .projection import ModalityProjector


class TokenSet(NamedTuple):
    """The four per-sample summary vectors, each of width d_model."""

    text_token1: torch.Tensor
    text_token2: torch.Tensor
    audio_token: torch.Tensor
    video_token: torch.Tensor

    def concat(self, extra: Optional[torch.Tensor] = None) -> torch.Tensor:
        parts = list(self)
        if extra is not None:
            parts.append(extra)
        return torch.cat(parts, dim=-1)


@dataclass
class CmfTrace:
    """Intermediates of one fusion network, kept only when requested."""

    branch_a: torch.Tensor
    branch_b: torch.Tensor
    merged: torch.Tensor
    aggregated: torch.Tensor
    scores: list[torch.Tensor] = field(default_factory=list)


@dataclass
class FusionIntermediate:
    text1: CmfTrace
    text2: CmfTrace
    audio: CmfTrace
    video: CmfTrace

    def all_scores(self) -> list[torch.Tensor]:
        scores: list[torch.Tensor] = []
        for trace in (self.text1, self.text2, self.audio, self.video):
            scores.extend(trace.scores)
        return scores


def extract_token(seq: torch.Tensor) -> torch.Tensor:
    """Position-0 vector of a fused sequence: [N, L, d] -> [N, d]."""
    if seq.ndim != 3 or seq.shape[1] < 1:
        raise ShapeError(f"expected [N, L>=1, d], got shape {tuple(seq.shape)}")
    return seq[:, 0, :]


class CmtStack(nn.Module):
    """M stacked cross-attention blocks; the query side is refined layer by
    layer while the key/value side stays fixed."""

    def __init__(self, d_model: int, n_heads: int, layers: int, ffn_mult: int, dropout: float):
        super().__init__()
        if layers < 1:
            raise ConfigError(f"a cross-attention stack needs >= 1 layers, got {layers}")
        self.layers = nn.ModuleList(
            MhaBlock(d_model, n_heads, ffn_mult=ffn_mult, dropout=dropout)
            for _ in range(layers)
        )

    def forward(
        self,
        query: torch.Tensor,
        kv: torch.Tensor,
        dropout_gen: Optional[torch.Generator] = None,
        score_sink: Optional[list[torch.Tensor]] = None,
    ) -> torch.Tensor:
        for layer in self.layers:
            if score_sink is not None:
                query, scores = layer(query, kv, dropout_gen=dropout_gen, return_scores=True)
                score_sink.append(scores)
            else:
                query = layer(query, kv, dropout_gen=dropout_gen)
        return query


class ChannelMerge(nn.Module):
    """Learned per-element weighted sum of two equally shaped sequences,
    realized as a 1x1 two-channel convolution."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size=1)

    def forward(self, branch_a: torch.Tensor, branch_b: torch.Tensor) -> torch.Tensor:
        if branch_a.shape != branch_b.shape:
            raise ShapeError(
                f"branches must match, got {tuple(branch_a.shape)} vs {tuple(branch_b.shape)}"
            )
        stacked = torch.stack([branch_a, branch_b], dim=1)  # [N, 2, L, d]
        return self.conv(stacked).squeeze(1)


class CmfNetwork(nn.Module):
    """One stream's fusion pipeline: two cross-attention stacks, channel
    merge, self-attention aggregation, token extraction."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.branch_a = CmtStack(
            config.d_model, config.n_heads, config.cmt_layers,
            config.ffn_mult, config.dropout,
        )
        self.branch_b = CmtStack(
            config.d_model, config.n_heads, config.cmt_layers,
            config.ffn_mult, config.dropout,
        )
        self.merge = ChannelMerge()
        self.aggregate = MhaBlock(
            config.d_model, config.n_heads,
            ffn_mult=config.ffn_mult, dropout=config.dropout,
        )

    def forward(
        self,
        query: torch.Tensor,
        kv_a: torch.Tensor,
        kv_b: torch.Tensor,
        dropout_gen: Optional[torch.Generator] = None,
        collect: bool = False,
    ) -> tuple[torch.Tensor, Optional[CmfTrace]]:
        sink: Optional[list[torch.Tensor]] = [] if collect else None
        fused_a = self.branch_a(query, kv_a, dropout_gen=dropout_gen, score_sink=sink)
        fused_b = self.branch_b(query, kv_b, dropout_gen=dropout_gen, score_sink=sink)
        merged = self.merge(fused_a, fused_b)
        if collect:
            aggregated, scores = self.aggregate(
                merged, merged, dropout_gen=dropout_gen, return_scores=True
            )
            assert sink is not None
            sink.append(scores)
            trace = CmfTrace(fused_a, fused_b, merged, aggregated, sink)
        else:
            aggregated = self.aggregate(merged, merged, dropout_gen=dropout_gen)
            trace = None
        return extract_token(aggregated), trace


class ModelOutput(NamedTuple):
    tokens: TokenSet
    prediction: torch.Tensor
    homogeneous: Optional[torch.Tensor]
    intermediate: Optional[FusionIntermediate]


class MiarModel(nn.Module):
    """Projection, four fusion networks, alignment MLPs, prediction head.

    The four fusion networks hold disjoint parameters; the two text networks
    are independent instances even though their wiring is symmetric.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.projector = ModalityProjector(config)
        self.cmf_text1 = CmfNetwork(config)
        self.cmf_text2 = CmfNetwork(config)
        self.cmf_audio = CmfNetwork(config)
        self.cmf_video = CmfNetwork(config)
        self.aligner = AlignmentProjector(config.d_model, config.d_align)
        self.head = PredictionHead(config.head_in_dim, config.d_model)

    def forward(
        self,
        batch: RawModalityBatch,
        dropout_gen: Optional[torch.Generator] = None,
        collect: bool = False,
    ) -> ModelOutput:
        """Run the full pipeline on a batch.

        Passing ``dropout_gen=None`` disables dropout everywhere, which makes
        evaluation bit-reproducible for identical inputs and parameters.
        """
        projected = self.projector(batch)
        f_t1, f_t2 = projected["text1"], projected["text2"]
        f_a, f_v = projected["audio"], projected["vision"]
        text_mean = (f_t1 + f_t2) / 2

        token_t1, trace_t1 = self.cmf_text1(f_t1, f_a, f_v, dropout_gen, collect)
        token_t2, trace_t2 = self.cmf_text2(f_t2, f_a, f_v, dropout_gen, collect)
        token_a, trace_a = self.cmf_audio(f_a, text_mean, f_v, dropout_gen, collect)
        token_v, trace_v = self.cmf_video(f_v, text_mean, f_a, dropout_gen, collect)
        tokens = TokenSet(token_t1, token_t2, token_a, token_v)

        homogeneous = None
        if self.config.use_homogeneous:
            homogeneous = self.projector.homogeneous_summary(projected)

        prediction = self.head(tokens.concat(homogeneous))

        intermediate = None
        if collect:
            intermediate = FusionIntermediate(trace_t1, trace_t2, trace_a, trace_v)
        return ModelOutput(tokens, prediction, homogeneous, intermediate)


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministically (re)initialize every parameter of ``model``.

    Linear/conv weights and biases draw from the fan-in-scaled uniform
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)); layer norms reset to identity.  The
    draw order follows module construction order, so a fixed seed fixes
    every parameter regardless of global RNG state.
    """
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Linear, nn.Conv1d, nn.Conv2d)):
            fan_in = module.weight.shape[1:].numel()
            bound = 1.0 / (fan_in ** 0.5)
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(module, nn.LayerNorm):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.fill_(0.0)


def build_model(
    config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32
) -> MiarModel:
    """Construct and seed a model in the requested float width."""
    model = MiarModel(config)
    init_parameters(model, seed)
    return model.to(dtype)
