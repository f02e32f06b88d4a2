"""Scaled-dot-product multi-head attention and the temporal aggregation block.

``MhaBlock`` is a post-norm transformer layer usable as self-attention (query
and key/value from the same stream) or cross-attention (key/value from a
different stream).  Temporal feature augmentation is the self-attention case:
every time step attends over the whole sequence of its own stream.

Dropout is only applied when the caller hands in a seeded ``torch.Generator``;
evaluation passes ``None`` and is therefore fully deterministic.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn

from .errors import ShapeError


def seeded_dropout(
    x: torch.Tensor, p: float, generator: Optional[torch.Generator]
) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator; identity if the
    generator is None or p == 0."""
    if generator is None or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def scaled_dot_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    dropout_p: float = 0.0,
    generator: Optional[torch.Generator] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """softmax(q kᵀ / sqrt(d_h)) v over per-head inputs.

    q: [N, h, L_q, d_h]; k, v: [N, h, L_kv, d_h].
    Returns (output [N, h, L_q, d_h], scores [N, h, L_q, L_kv]); the returned
    scores are the normalized pre-dropout attention weights, so each row sums
    to 1.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(
            f"query head dim {q.shape[-1]} != key head dim {k.shape[-1]}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"key length {k.shape[-2]} != value length {v.shape[-2]}"
        )
    d_h = q.shape[-1]
    logits = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(d_h)
    scores = torch.softmax(logits, dim=-1)
    weights = seeded_dropout(scores, dropout_p, generator)
    return torch.matmul(weights, v), scores


class MhaBlock(nn.Module):
    """Multi-head attention -> add & norm -> FFN -> add & norm.

    The query/key/value/output maps carry no bias; the FFN does.  One block
    instance owns its own weights and can be stacked or reused self-wise.
    """

    def __init__(self, d_model: int, n_heads: int, ffn_mult: int = 4, dropout: float = 0.1):
        super().__init__()
        if d_model % n_heads != 0:
            raise ShapeError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.dropout_p = dropout

        self.wq = nn.Linear(d_model, d_model, bias=False)
        self.wk = nn.Linear(d_model, d_model, bias=False)
        self.wv = nn.Linear(d_model, d_model, bias=False)
        self.wo = nn.Linear(d_model, d_model, bias=False)
        self.ffn1 = nn.Linear(d_model, ffn_mult * d_model)
        self.ffn2 = nn.Linear(ffn_mult * d_model, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        n, length, _ = x.shape
        return x.view(n, length, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query_seq: torch.Tensor,
        kv_seq: torch.Tensor,
        dropout_gen: Optional[torch.Generator] = None,
        return_scores: bool = False,
    ):
        """query_seq: [N, L_q, d_model]; kv_seq: [N, L_kv, d_model].

        Returns the transformed query sequence, optionally with the
        attention scores [N, h, L_q, L_kv].
        """
        if query_seq.shape[-1] != self.d_model or kv_seq.shape[-1] != self.d_model:
            raise ShapeError(
                f"inputs must have width {self.d_model}, got "
                f"{query_seq.shape[-1]} and {kv_seq.shape[-1]}"
            )
        if query_seq.shape[0] != kv_seq.shape[0]:
            raise ShapeError("query and key/value batch sizes differ")

        q = self._split_heads(self.wq(query_seq))
        k = self._split_heads(self.wk(kv_seq))
        v = self._split_heads(self.wv(kv_seq))
        attended, scores = scaled_dot_attention(
            q, k, v, dropout_p=self.dropout_p, generator=dropout_gen
        )
        n, _, length, _ = attended.shape
        merged = attended.transpose(1, 2).reshape(n, length, self.d_model)
        x = self.norm1(query_seq + self.wo(merged))

        hidden = torch.relu(self.ffn1(x))
        hidden = seeded_dropout(hidden, self.dropout_p, dropout_gen)
        out = self.norm2(x + self.ffn2(hidden))
        if return_scores:
            return out, scores
        return out


def tfa(
    seq: torch.Tensor,
    block: MhaBlock,
    dropout_gen: Optional[torch.Generator] = None,
    return_scores: bool = False,
):
    """Temporal feature augmentation: the block applied self-wise, mixing
    every time step with the stream's global context."""
    return block(seq, seq, dropout_gen=dropout_gen, return_scores=return_scores)
