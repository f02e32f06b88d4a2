"""Token alignment: shared-space projection and the three alignment losses.

The four tokens pass through per-stream two-layer MLPs into one alignment
space (rows L2-normalized by default; without normalization the norm loss
could be driven to zero by shrinking all embeddings, which the scale-invariant
contrastive terms would never notice).  Losses:

- text-text contrastive: symmetric InfoNCE over the two text embeddings,
- audio-video contrastive: the same loss over audio/video embeddings,
- norm alignment: mean p-norm distance pairing text1 with audio and text2
  with vision.

The combined alignment loss is contrastive terms plus alpha times the norm
term; the training objective adds omega times that to the regression loss.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Union

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError

COSINE_EPS = 1e-8

Scalar = Union[torch.Tensor, float]


@dataclass
class LossBreakdown:
    """One step's loss terms.  ``align`` and ``total`` always satisfy
    align = ttcl + avcl + alpha * tatvm and total = task + omega * align."""

    ttcl: Scalar
    avcl: Scalar
    tatvm: Scalar
    align: Scalar
    alpha: float
    task: Optional[Scalar] = None
    total: Optional[Scalar] = None
    omega: Optional[float] = None

    def detached(self) -> "LossBreakdown":
        """Plain-float copy for logging.  The combined terms are recomputed
        from the logged components in float64 so the arithmetic identities
        hold exactly in the record, independent of training precision."""

        def as_float(x: Optional[Scalar]) -> Optional[float]:
            if x is None:
                return None
            return float(x.item()) if isinstance(x, torch.Tensor) else float(x)

        ttcl, avcl, tatvm = as_float(self.ttcl), as_float(self.avcl), as_float(self.tatvm)
        align = ttcl + avcl + self.alpha * tatvm
        task = as_float(self.task)
        total = None
        if task is not None and self.omega is not None:
            total = task + self.omega * align
        return LossBreakdown(
            ttcl=ttcl, avcl=avcl, tatvm=tatvm, align=align,
            alpha=self.alpha, task=task, total=total, omega=self.omega,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self.detached())

    @classmethod
    def from_dict(cls, values: dict) -> "LossBreakdown":
        return cls(**values)


@dataclass
class AlignedTokens:
    """The four tokens mapped into the alignment space: [N, d_align] each."""

    t1: torch.Tensor
    t2: torch.Tensor
    a: torch.Tensor
    v: torch.Tensor


class AlignmentProjector(nn.Module):
    """Four independent two-layer MLPs, one per token stream."""

    def __init__(self, d_model: int, d_align: int):
        super().__init__()
        self.mlps = nn.ModuleList(
            nn.Sequential(
                nn.Linear(d_model, d_model),
                nn.ReLU(),
                nn.Linear(d_model, d_align),
            )
            for _ in range(4)
        )

    def forward(self, tokens, normalize: bool = True) -> AlignedTokens:
        """tokens: any 4-sequence of [N, d_model] tensors in the order
        (text1, text2, audio, video)."""
        outputs = []
        for mlp, token in zip(self.mlps, tokens):
            if token.shape[-1] != self.mlps[0][0].in_features:
                raise ShapeError(
                    f"token width {token.shape[-1]} does not match MLP input "
                    f"{self.mlps[0][0].in_features}"
                )
            out = mlp(token)
            if normalize:
                out = F.normalize(out, dim=-1)
            outputs.append(out)
        return AlignedTokens(*outputs)


def align_project(tokens, mlps: AlignmentProjector, normalize: bool = True) -> AlignedTokens:
    return mlps(tokens, normalize=normalize)


def cosine_similarity_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """All-pairs cosine similarity: out[i, j] compares a[i] with b[j].

    Row/column norms are guarded by a small epsilon so zero vectors yield
    zero similarity instead of NaN.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"expected [N, d] pairs of equal width, got {tuple(a.shape)} and {tuple(b.shape)}"
        )
    norms_a = a.norm(dim=1, keepdim=True)
    norms_b = b.norm(dim=1, keepdim=True)
    return (a @ b.T) / (norms_a * norms_b.T + COSINE_EPS)


def info_nce_from_similarity(sims: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE on a precomputed [N, N] similarity matrix whose
    diagonal holds the positive pairs: cross-entropy against the diagonal,
    averaged over the N row-anchored and N column-anchored directions,
    i.e. (1/2N) * sum of both per-sample terms."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {tuple(sims.shape)}")
    logits = sims / tau
    targets = torch.arange(sims.shape[0], device=sims.device)
    return 0.5 * (
        F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets)
    )


def info_nce(a: torch.Tensor, b: torch.Tensor, tau: float) -> torch.Tensor:
    """Bidirectional contrastive loss between two embedding sets, with
    same-index pairs as positives.

    Similarities are cosine, so the loss is invariant to positive rescaling
    of either input.
    """
    return info_nce_from_similarity(cosine_similarity_matrix(a, b), tau)


def norm_align_loss(
    t1: torch.Tensor,
    a: torch.Tensor,
    t2: torch.Tensor,
    v: torch.Tensor,
    p: int,
) -> torch.Tensor:
    """(1/2N) * sum_i (||t1_i - a_i||_p + ||t2_i - v_i||_p), p in {1, 2}."""
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    if t1.shape != a.shape or t2.shape != v.shape or t1.shape != t2.shape:
        raise ShapeError("all four inputs must share one shape")

    def row_norms(diff: torch.Tensor) -> torch.Tensor:
        if p == 1:
            return diff.abs().sum(dim=-1)
        return diff.pow(2).sum(dim=-1).sqrt()

    n = t1.shape[0]
    return (row_norms(t1 - a).sum() + row_norms(t2 - v).sum()) / (2 * n)


def alignment_loss(
    aligned: AlignedTokens, tau: float, alpha: float, p: int,
    contrastive: bool = True, norm: bool = True,
) -> LossBreakdown:
    """Compose the three alignment terms into a partial LossBreakdown.

    The ``contrastive``/``norm`` switches zero out dropped terms exactly, so
    the breakdown identities keep holding under ablation.
    """
    zero = aligned.t1.new_zeros(())
    if contrastive:
        ttcl = info_nce(aligned.t1, aligned.t2, tau)
        avcl = info_nce(aligned.a, aligned.v, tau)
    else:
        ttcl, avcl = zero, zero
    tatvm = norm_align_loss(aligned.t1, aligned.a, aligned.t2, aligned.v, p) if norm else zero
    align = ttcl + avcl + alpha * tatvm
    return LossBreakdown(ttcl=ttcl, avcl=avcl, tatvm=tatvm, align=align, alpha=alpha)
