import math

import numpy as np
import pytest
import torch

from hcpc.numerics import grad_check
from hcpc.segmenter import SegmentationError, pool_segments, segmentation_from_boundaries
from hcpc.unit_cpc import (
    Codebook,
    SegmentEncoder,
    UnitCPC,
    UnitContext,
    UnitCpcConfig,
    cpc_high_loss,
    kmeans_loss,
    quantize,
    sample_random_unit_negatives,
    straight_through,
    upsample,
)


def test_encoder_is_row_wise():
    torch.manual_seed(0)
    enc = SegmentEncoder(6, 16, 8).double()
    s = torch.randn(5, 6, dtype=torch.float64)
    s[3] = s[1]
    u = enc(s)
    assert u.shape == (5, 8)
    assert torch.equal(u[3], u[1])
    jac = torch.autograd.functional.jacobian(enc, s)  # (5, 8, 5, 6)
    for j in range(5):
        for k in range(5):
            if j != k:
                assert not jac[j, :, k].any()


def test_encoder_rejects_empty():
    with pytest.raises(SegmentationError, match="empty segmentation"):
        SegmentEncoder(4, 8, 4)(torch.zeros(1, 0, 4))


def test_unit_context_causal():
    torch.manual_seed(1)
    ctx = UnitContext(8).double()
    u = torch.randn(1, 10, 8, dtype=torch.float64)
    h = ctx(u)
    u2 = u.clone()
    u2[0, 4] += 3.0
    assert torch.equal(h[:, :5], ctx(u2)[:, :5])
    assert ctx(u[:, :1]).shape == (1, 1, 8)


def test_unit_context_long_range_gradient():
    torch.manual_seed(2)
    ctx = UnitContext(8).double()
    u = torch.randn(1, 12, 8, dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(ctx(u)[0, -1].sum(), u)
    assert g[0, 0].abs().max() > 0


def test_quantize_examples():
    codes = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
    idx, uq = quantize(torch.tensor([[0.9, 0.8], [0.5, 0.5]]), codes)
    assert idx.tolist() == [1, 0]  # second row is equidistant
    assert torch.equal(uq, codes[idx])


def test_quantize_matches_brute_force():
    g = torch.Generator().manual_seed(3)
    codes = torch.randn(8, 5, generator=g)
    u = torch.randn(200, 5, generator=g)
    idx, _ = quantize(u, codes)
    for i in range(200):
        dists = [float(((u[i] - codes[j]) ** 2).sum()) for j in range(8)]
        assert idx[i].item() == int(np.argmin(dists))


def test_straight_through_passes_gradient():
    u = torch.randn(4, 3, requires_grad=True)
    e = torch.randn(4, 3)
    out = straight_through(u, e)
    torch.testing.assert_close(out, e)
    out.sum().backward()
    assert torch.equal(u.grad, torch.ones_like(u))


def test_kmeans_loss_zero_on_codewords():
    e = torch.randn(6, 4)
    assert kmeans_loss(e.clone(), e, 0.25).item() == 0.0


def test_kmeans_loss_without_commitment_has_no_gradient_in_u():
    u = torch.randn(6, 4, requires_grad=True)
    e = torch.randn(6, 4, requires_grad=True)
    kmeans_loss(u, e, 0.0).backward()
    assert torch.equal(u.grad, torch.zeros_like(u))
    assert e.grad.abs().sum() > 0


def test_kmeans_loss_grad_check():
    # stop-gradients make each argument see only its own term, so each is
    # checked against finite differences of that term alone
    g = torch.Generator().manual_seed(4)
    u = torch.randn(5, 3, dtype=torch.float64, generator=g)
    e = torch.randn(5, 3, dtype=torch.float64, generator=g)
    lam = 0.25

    def autograd_wrt(which):
        def grads(x):
            x = x.detach().requires_grad_(True)
            loss = kmeans_loss(x, e, lam) if which == "u" else kmeans_loss(u, x, lam)
            return list(torch.autograd.grad(loss, x))

        return grads

    sq = lambda a, b: ((a - b) ** 2).sum(-1).mean()
    report_e = grad_check(lambda x: sq(u, x), [e], tol=1e-4, analytic=autograd_wrt("e"))
    report_u = grad_check(lambda x: lam * sq(x, e), [u], tol=1e-4, analytic=autograd_wrt("u"))
    assert report_e.passed, report_e.per_param
    assert report_u.passed, report_u.per_param


def test_ema_codebook_converges_to_cluster_means():
    g = torch.Generator().manual_seed(5)
    means = torch.tensor([[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0], [0.0, -2.0]])
    cb = Codebook(4, 2, decay=0.99)
    cb.init_from(means + 0.3 * torch.randn(4, 2, generator=g))
    for _ in range(100):
        x = means.repeat(250, 1) + 0.1 * torch.randn(1000, 2, generator=g)
        idx, _ = quantize(x, cb.embeddings)
        cb.ema_update(x, idx, g)
    dist = torch.cdist(means, cb.embeddings)
    assert dist.min(1).values.max() < 0.05
    assert len(set(dist.argmin(1).tolist())) == 4


def test_dead_codes_are_reseeded():
    g = torch.Generator().manual_seed(6)
    cb = Codebook(3, 2, decay=0.9, dead_code_steps=5)
    cb.init_from(torch.tensor([[0.0, 0.0], [100.0, 100.0], [1.0, 0.0]]))
    x = torch.randn(50, 2, generator=g) * 0.1
    reseeded = 0
    for _ in range(5):
        idx, _ = quantize(x, cb.embeddings)
        reseeded += cb.ema_update(x, idx, g)
    assert reseeded >= 1
    assert cb.embeddings[1].norm() < 1.0


def _adjacent_fixture(g, B=2, S=7, M=2, D=4):
    targets = torch.randn(B, S, D, dtype=torch.float64, generator=g)
    preds = torch.randn(B, S, M, D, dtype=torch.float64, generator=g)
    return targets, preds


def test_high_loss_uniform_scores():
    targets = torch.ones(2, 6, 4)
    preds = torch.randn(2, 6, 2, 4)
    loss, _, _ = cpc_high_loss(targets, preds, torch.tensor([6, 5]))
    assert loss.item() == pytest.approx(math.log(3), abs=1e-6)


def test_high_loss_vanishes_with_dominant_target():
    S, M = 8, 2
    targets = torch.eye(S, dtype=torch.float64)[None]
    values = []
    for alpha in (1.0, 10.0, 40.0):
        preds = torch.zeros(1, S, M, S, dtype=torch.float64)
        for k in range(S):
            for m in range(1, M + 1):
                if k + m < S:
                    preds[0, k, m - 1] = alpha * targets[0, k + m]
        values.append(cpc_high_loss(targets, preds, torch.tensor([S]))[0].item())
    assert values[0] > values[1] > values[2] and values[2] < 1e-12


def test_high_loss_matches_loop_oracle():
    g = torch.Generator().manual_seed(7)
    targets, preds = _adjacent_fixture(g)
    n_seg = torch.tensor([7, 5])
    loss, per_seq, n_short = cpc_high_loss(targets, preds, n_seg)
    all_terms = []
    for i in range(2):
        terms = []
        for k in range(7):
            for m in range(1, 3):
                j = k + m
                if j + 1 >= n_seg[i]:
                    continue
                scores = torch.stack([preds[i, k, m - 1] @ targets[i, c] for c in (j, j - 1, j + 1)])
                terms.append(-torch.log_softmax(scores, 0)[0])
        assert per_seq[i].item() == pytest.approx(torch.stack(terms).mean().item(), abs=1e-12)
        all_terms += terms
    assert loss.item() == pytest.approx(torch.stack(all_terms).mean().item(), abs=1e-12)
    assert n_short == 0


def test_high_loss_short_sequences_counted():
    g = torch.Generator().manual_seed(8)
    targets, preds = _adjacent_fixture(g)
    loss, per_seq, n_short = cpc_high_loss(targets, preds, torch.tensor([2, 1]))
    assert n_short == 2
    assert per_seq.tolist() == [0.0, 0.0]
    assert loss.item() == 0.0


def test_high_loss_grad_check_with_fixed_assignment():
    g = torch.Generator().manual_seed(9)
    targets, preds = _adjacent_fixture(g)
    n_seg = torch.tensor([7, 6])
    report = grad_check(lambda t, p: cpc_high_loss(t, p, n_seg)[0], [targets, preds], tol=1e-4)
    assert report.passed, report.per_param


def test_high_loss_at_init_near_chance():
    torch.manual_seed(10)
    cfg = UnitCpcConfig(d_prime=16, hidden=16, codebook_size=8)
    model = UnitCPC(8, cfg).double()
    g = torch.Generator().manual_seed(11)
    z = torch.randn(8, 64, 8, dtype=torch.float64, generator=g)
    b = (torch.rand(8, 64, generator=g) < 0.125).double()
    s, seg = pool_segments(z, b)
    u, h, preds = model(s, seg.mask)
    model.codebook.init_from(u.detach()[seg.mask], g)
    _, e = quantize(u, model.codebook.embeddings)
    loss, _, _ = cpc_high_loss(straight_through(u, e), preds, seg.n_segments)
    assert abs(loss.item() - math.log(3)) < 0.15


def test_random_negatives_exclude_target():
    n_seg = torch.tensor([6, 4])
    neg = sample_random_unit_negatives(n_seg, 6, 2, torch.Generator().manual_seed(12))
    assert neg.shape == (2, 6, 2, 2)
    for i in range(2):
        for k in range(6):
            for m in range(1, 3):
                if k + m + 1 < n_seg[i]:
                    pair = neg[i, k, m - 1].tolist()
                    assert k + m not in pair
                    assert max(pair) < n_seg[i]
                    assert pair[0] != pair[1]


def test_upsample_examples():
    seg = segmentation_from_boundaries(torch.tensor([[1.0, 0.0, 1.0]]))
    seq = torch.tensor([[[1.0], [2.0]]])
    assert upsample(seq, seg)[0, :, 0].tolist() == [1.0, 1.0, 2.0]
    ident = segmentation_from_boundaries(torch.ones(1, 5))
    x = torch.randn(1, 5, 3)
    assert torch.equal(upsample(x, ident), x)


def test_pool_then_upsample_reproduces_piecewise_constant():
    # dyadic levels keep segment sums exact in float32
    levels = torch.randint(-64, 64, (4, 3), generator=torch.Generator().manual_seed(13)) / 8.0
    lengths = [3, 5, 1, 7]
    z = torch.cat([levels[j].expand(n, 3) for j, n in enumerate(lengths)])[None]
    b = torch.zeros(1, sum(lengths))
    b[0, np.cumsum([0] + lengths[:-1])] = 1
    s, seg = pool_segments(z, b)
    assert torch.equal(upsample(s, seg), z)


def test_upsample_mismatch():
    seg = segmentation_from_boundaries(torch.tensor([[1.0, 0.0, 1.0]]))
    with pytest.raises(SegmentationError, match="span/sequence mismatch"):
        upsample(torch.zeros(1, 3, 2), seg)
