import math

import numpy as np
import pytest
import torch

from miar.alignment import (
    AlignedTokens,
    AlignmentProjector,
    LossBreakdown,
    alignment_loss,
    cosine_similarity_matrix,
    info_nce,
    info_nce_from_similarity,
    norm_align_loss,
)
from miar.errors import ShapeError
from miar.trainer import finite_difference_max_rel_err


def rand(n, d, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(n, d, generator=gen, dtype=dtype)


# -------------------------------------------------------------- projection


def test_aligned_rows_are_unit_norm():
    proj = AlignmentProjector(d_model=8, d_align=4)
    tokens = [rand(5, 8, seed=i, dtype=torch.float32) for i in range(4)]
    aligned = proj(tokens, normalize=True)
    for out in (aligned.t1, aligned.t2, aligned.a, aligned.v):
        assert out.shape == (5, 4)
        assert (out.norm(dim=1) - 1).abs().max() < 1e-6


def test_default_alignment_width():
    proj = AlignmentProjector(d_model=50, d_align=32)
    tokens = [rand(3, 50, seed=i, dtype=torch.float32) for i in range(4)]
    aligned = proj(tokens, normalize=True)
    assert aligned.t1.shape == (3, 32)


def test_zero_mlps_give_zero_outputs():
    proj = AlignmentProjector(d_model=6, d_align=3)
    with torch.no_grad():
        for p in proj.parameters():
            p.zero_()
    tokens = [rand(4, 6, seed=i, dtype=torch.float32) for i in range(4)]
    aligned = proj(tokens, normalize=False)
    assert torch.equal(aligned.t1, torch.zeros(4, 3))


def test_projection_width_mismatch():
    proj = AlignmentProjector(d_model=6, d_align=3)
    with pytest.raises(ShapeError):
        proj([rand(4, 7, dtype=torch.float32)] * 4, normalize=False)


def test_streams_use_independent_mlps():
    proj = AlignmentProjector(d_model=6, d_align=3)
    token = rand(4, 6, dtype=torch.float32)
    aligned = proj([token, token, token, token], normalize=False)
    assert not torch.equal(aligned.t1, aligned.t2)


# ------------------------------------------------------------------- cosine


def test_cosine_hand_oracle():
    a = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    b = torch.tensor([[1 / math.sqrt(2), 1 / math.sqrt(2)], [1.0, 0.0]])
    m = cosine_similarity_matrix(a, b)
    expected = torch.tensor([[0.7071, 1.0], [0.7071, 0.0]])
    assert (m - expected).abs().max() < 1e-4


def test_cosine_self_similarity_diagonal():
    a = torch.nn.functional.normalize(rand(6, 4), dim=1)
    m = cosine_similarity_matrix(a, a)
    assert (m.diagonal() - 1).abs().max() < 1e-6


def test_cosine_orthogonal_vectors():
    a = torch.tensor([[1.0, 0.0, 0.0]])
    b = torch.tensor([[0.0, 2.0, 0.0]])
    assert abs(float(cosine_similarity_matrix(a, b))) < 1e-7


def test_cosine_scale_invariance():
    a, b = rand(5, 3, seed=1), rand(5, 3, seed=2)
    m1 = cosine_similarity_matrix(a, b)
    m2 = cosine_similarity_matrix(3.7 * a, b)
    assert (m1 - m2).abs().max() < 1e-6


def test_cosine_range():
    a, b = rand(8, 5, seed=3), rand(8, 5, seed=4)
    m = cosine_similarity_matrix(a, b)
    assert m.min() >= -1 - 1e-6 and m.max() <= 1 + 1e-6


def test_cosine_zero_vector_guarded():
    a = torch.zeros(2, 3)
    b = rand(2, 3, dtype=torch.float32)
    m = cosine_similarity_matrix(a, b)
    assert torch.isfinite(m).all()
    assert torch.equal(m, torch.zeros(2, 2))


# ------------------------------------------------------------------ InfoNCE


def test_info_nce_identical_rows_is_log_n():
    row = rand(1, 6)
    a = row.repeat(4, 1)
    for tau in (0.07, 0.5, 1.0):
        loss = info_nce(a, a.clone(), tau)
        assert abs(float(loss) - math.log(4)) < 1e-9


def test_info_nce_orthonormal_closed_form():
    # matched orthonormal pairs: similarity matrix is the identity, so the
    # per-sample loss has the closed form -log(e^{1/tau} / (e^{1/tau} + 3))
    a = torch.eye(4, dtype=torch.float64)
    loss = float(info_nce(a, a.clone(), 0.07))
    expected = -math.log(math.exp(1 / 0.07) / (math.exp(1 / 0.07) + 3))
    assert abs(loss - expected) < 1e-9
    assert loss <= 1e-5  # approx 1.87e-6


def test_info_nce_symmetric_in_argument_order():
    for seed in range(100):
        a, b = rand(4, 5, seed=seed), rand(4, 5, seed=1000 + seed)
        diff = abs(float(info_nce(a, b, 0.07)) - float(info_nce(b, a, 0.07)))
        assert diff < 1e-9


def test_info_nce_rejects_bad_temperature():
    a = rand(3, 4)
    with pytest.raises(ValueError):
        info_nce(a, a, 0.0)
    with pytest.raises(ValueError):
        info_nce(a, a, -1.0)


def test_info_nce_scale_invariance():
    # exact only up to the epsilon guard in the cosine denominator
    a, b = rand(5, 6, seed=8), rand(5, 6, seed=9)
    base = float(info_nce(a, b, 0.07))
    assert abs(float(info_nce(2.5 * a, b, 0.07)) - base) < 1e-6
    assert abs(float(info_nce(a, 0.1 * b, 0.07)) - base) < 1e-6


def test_info_nce_similarity_monotonicity():
    # raising a diagonal similarity never increases the loss; raising an
    # off-diagonal one never decreases it
    gen = torch.Generator().manual_seed(5)
    for _ in range(10):
        sims = torch.rand(4, 4, generator=gen, dtype=torch.float64) * 2 - 1
        base = float(info_nce_from_similarity(sims, 0.2))
        for i in range(4):
            for j in range(4):
                bumped = sims.clone()
                bumped[i, j] = min(1.0, float(bumped[i, j]) + 0.05)
                value = float(info_nce_from_similarity(bumped, 0.2))
                if i == j:
                    assert value <= base + 1e-12
                else:
                    assert value >= base - 1e-12


def test_single_sample_contrast_is_zero():
    a = rand(1, 4)
    assert abs(float(info_nce(a, a.clone(), 0.07))) < 1e-12


# --------------------------------------------------------------- norm align


def test_norm_align_zero_for_matched_pairs():
    t1, t2 = rand(3, 4, seed=1), rand(3, 4, seed=2)
    assert float(norm_align_loss(t1, t1.clone(), t2, t2.clone(), p=1)) == 0.0
    assert float(norm_align_loss(t1, t1.clone(), t2, t2.clone(), p=2)) == 0.0


def test_norm_align_hand_values():
    t1 = torch.tensor([[1.0, 0.0]])
    a = torch.tensor([[0.0, 0.0]])
    t2 = torch.tensor([[0.5, 0.5]])
    v = t2.clone()
    assert abs(float(norm_align_loss(t1, a, t2, v, p=1)) - 0.5) < 1e-7
    assert abs(float(norm_align_loss(t1, a, t2, v, p=2)) - 0.5) < 1e-7

    t1b = torch.tensor([[1.0, 1.0]])
    assert abs(float(norm_align_loss(t1b, a, t2, v, p=1)) - 1.0) < 1e-7
    assert abs(float(norm_align_loss(t1b, a, t2, v, p=2)) - math.sqrt(2) / 2) < 1e-6


def test_norm_align_rejects_bad_inputs():
    x = rand(2, 3)
    with pytest.raises(ValueError):
        norm_align_loss(x, x, x, x, p=3)
    with pytest.raises(ShapeError):
        norm_align_loss(x, rand(2, 4), x, x, p=1)


# ---------------------------------------------------------- composed losses


def uniform_aligned(n=4, d=6):
    row = rand(1, d)
    t = row.repeat(n, 1)
    return AlignedTokens(t1=t, t2=t.clone(), a=t.clone(), v=t.clone())


def test_alignment_loss_uniform_case():
    breakdown = alignment_loss(uniform_aligned(), tau=0.07, alpha=1.0, p=1)
    assert abs(float(breakdown.ttcl) - math.log(4)) < 1e-9
    assert abs(float(breakdown.avcl) - math.log(4)) < 1e-9
    assert float(breakdown.tatvm) == 0.0
    assert abs(float(breakdown.align) - 2 * math.log(4)) < 1e-9


def test_alignment_loss_alpha_zero():
    aligned = AlignedTokens(
        t1=rand(3, 5, seed=1), t2=rand(3, 5, seed=2),
        a=rand(3, 5, seed=3), v=rand(3, 5, seed=4),
    )
    breakdown = alignment_loss(aligned, tau=0.07, alpha=0.0, p=1)
    assert float(breakdown.align) == float(breakdown.ttcl + breakdown.avcl)


def test_alignment_loss_compositional():
    aligned = AlignedTokens(
        t1=rand(3, 5, seed=5), t2=rand(3, 5, seed=6),
        a=rand(3, 5, seed=7), v=rand(3, 5, seed=8),
    )
    breakdown = alignment_loss(aligned, tau=0.07, alpha=2.0, p=1)
    expected = (
        float(info_nce(aligned.t1, aligned.t2, 0.07))
        + float(info_nce(aligned.a, aligned.v, 0.07))
        + 2.0 * float(norm_align_loss(aligned.t1, aligned.a, aligned.t2, aligned.v, 1))
    )
    assert abs(float(breakdown.align) - expected) < 1e-12


def test_alignment_loss_term_switches():
    aligned = AlignedTokens(
        t1=rand(3, 5, seed=5), t2=rand(3, 5, seed=6),
        a=rand(3, 5, seed=7), v=rand(3, 5, seed=8),
    )
    no_contrast = alignment_loss(aligned, tau=0.07, alpha=1.0, p=1, contrastive=False)
    assert float(no_contrast.ttcl) == 0.0 and float(no_contrast.avcl) == 0.0
    assert float(no_contrast.align) == float(no_contrast.tatvm)
    no_norm = alignment_loss(aligned, tau=0.07, alpha=1.0, p=1, norm=False)
    assert float(no_norm.tatvm) == 0.0
    both_off = alignment_loss(aligned, tau=0.07, alpha=1.0, p=1, contrastive=False, norm=False)
    assert float(both_off.align) == 0.0


def test_breakdown_identities_in_detached_record():
    aligned = AlignedTokens(
        t1=rand(4, 5, seed=11), t2=rand(4, 5, seed=12),
        a=rand(4, 5, seed=13), v=rand(4, 5, seed=14),
    )
    breakdown = alignment_loss(aligned, tau=0.07, alpha=1.7, p=2)
    import dataclasses

    breakdown = dataclasses.replace(
        breakdown, task=2.25, total=None, omega=0.1
    ).detached()
    assert abs(breakdown.align - (breakdown.ttcl + breakdown.avcl + 1.7 * breakdown.tatvm)) < 1e-9
    assert abs(breakdown.total - (breakdown.task + 0.1 * breakdown.align)) < 1e-9


# ---------------------------------------------------------------- gradients


def fd_check(inputs, loss_fn, eps=1e-6):
    for t in inputs:
        t.grad = None
    loss_fn().backward()
    params = [t.data for t in inputs]
    grads = [t.grad for t in inputs]
    worst, _ = finite_difference_max_rel_err(
        params, lambda: loss_fn().detach(), grads,
        sample_fraction=1.0, eps=eps, rng=np.random.default_rng(0),
    )
    return worst


def test_info_nce_gradients():
    a = rand(3, 5, seed=21).requires_grad_(True)
    b = rand(3, 5, seed=22).requires_grad_(True)
    assert fd_check([a, b], lambda: info_nce(a, b, 0.07)) <= 1e-4


def test_norm_align_gradients_p2():
    ts = [rand(3, 5, seed=30 + i).requires_grad_(True) for i in range(4)]
    assert fd_check(ts, lambda: norm_align_loss(*ts, p=2)) <= 1e-4


def test_norm_align_gradients_p1_off_kink():
    # random continuous inputs keep every coordinate difference away from 0
    ts = [rand(3, 5, seed=40 + i).requires_grad_(True) for i in range(4)]
    assert fd_check(ts, lambda: norm_align_loss(*ts, p=1)) <= 1e-4


def test_alignment_loss_gradients():
    ts = [rand(3, 5, seed=50 + i).requires_grad_(True) for i in range(4)]

    def loss_fn():
        aligned = AlignedTokens(*ts)
        return alignment_loss(aligned, tau=0.07, alpha=1.0, p=2).align

    assert fd_check(ts, loss_fn) <= 1e-4
