import numpy as np
import pytest
import torch

from freqad.model import (
    AEConfig, BranchKind, CSAttention, FrequencyAE, ae_forward, integrate_complement, rec_loss,
)
from freqad.spectral import decouple
from freqad.training import Detector

SMALL = AEConfig(in_planes=2, widths=[4, 8], latent=4, seed=1)


def test_output_shape_and_determinism():
    ae = FrequencyAE(AEConfig(in_planes=8, widths=[8, 16, 32], latent=16))
    x = torch.rand(3, 8, 32, 32)
    y1, y2 = ae_forward(ae, x), ae_forward(ae, x)
    assert y1.shape == x.shape
    assert torch.equal(y1, y2)
    assert ae_forward(ae, x[0]).shape == (8, 32, 32)


def test_attention_disabled_still_shape_preserving():
    cfg = AEConfig(in_planes=2, widths=[4, 8], latent=4, attention=False)
    ae = FrequencyAE(cfg)
    assert not any(isinstance(m, CSAttention) for m in ae.modules())
    assert ae(torch.rand(2, 2, 8, 8)).shape == (2, 2, 8, 8)


def test_attention_gates_in_unit_interval():
    att = CSAttention(6)
    x = torch.randn(4, 6, 8, 8) * 5
    cg = att.channel.gate(x)
    sg = att.spatial.gate(att.channel(x))
    for g in (cg, sg):
        assert (g > 0).all() and (g < 1).all()
    assert att(x).shape == x.shape


def test_shape_rejections():
    ae = FrequencyAE(SMALL)
    with pytest.raises(ValueError):
        ae(torch.rand(1, 3, 8, 8))
    with pytest.raises(ValueError):
        ae(torch.rand(1, 2, 6, 6))
    with pytest.raises(ValueError):
        AEConfig(widths=[])


def test_same_seed_same_weights():
    a, b = FrequencyAE(SMALL), FrequencyAE(SMALL)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_integrate_complement():
    x = np.random.default_rng(0).random((8, 32, 32))
    b = decouple(x, 5)
    xl, xh = torch.from_numpy(b.x_lpf), torch.from_numpy(b.x_hpf)
    xt = integrate_complement(xl, xh)
    assert (xt - torch.from_numpy(x)).abs().max() < 1e-4
    assert torch.equal(integrate_complement(torch.zeros_like(xh), xh), xh)
    with pytest.raises(ValueError):
        integrate_complement(xl, xh[:4])


def test_integrate_complement_paths_agree():
    g = torch.Generator().manual_seed(0)
    for _ in range(10):
        a, c = torch.randn(2, 8, 32, 32, generator=g), torch.randn(2, 8, 32, 32, generator=g)
        spatial = integrate_complement(a, c)
        freq = integrate_complement(a, c, via_frequency=True)
        assert (spatial - freq).abs().max() < 1e-5


def test_rec_loss_zero_and_hand_case():
    x = torch.rand(2, 8, 16, 16)
    for kind in BranchKind:
        assert rec_loss(x, x.clone(), kind, 5, 1e-2) == 0
    plane = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    assert rec_loss(plane, torch.zeros(2, 2), BranchKind.fused, 5, 0.0).item() == pytest.approx(0.5)


def test_rec_loss_frequency_term_by_hand():
    # identity mask: F of the 2x2 difference [[0,1],[1,0]] is [[2,0],[0,-2]]; mean |Re|+|Im| = 1
    plane = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    loss = rec_loss(plane, torch.zeros_like(plane), BranchKind.fused, 5, 1.0)
    assert loss.item() == pytest.approx(0.5 + 1.0)


def test_rec_loss_permutation_invariant_without_freq_term():
    g = torch.Generator().manual_seed(1)
    x, y = torch.rand(4, 8, 8, generator=g), torch.rand(4, 8, 8, generator=g)
    perm = torch.randperm(x.numel(), generator=g)
    xp, yp = x.flatten()[perm].reshape(x.shape), y.flatten()[perm].reshape(y.shape)
    assert rec_loss(x, y, "low", 5, 0.0).item() == pytest.approx(rec_loss(xp, yp, "low", 5, 0.0).item(), rel=1e-6)


def test_rec_loss_band_mask_selects_band():
    # a DC error is invisible to the high-band term; a Nyquist checkerboard nearly so to the low one
    x = torch.zeros(1, 32, 32, dtype=torch.float64)

    def freq_terms(err):
        spatial = rec_loss(x, err, "low", 5, 0.0).item()
        return (rec_loss(x, err, "low", 5, 1.0).item() - spatial,
                rec_loss(x, err, "high", 5, 1.0).item() - spatial)

    low, high = freq_terms(torch.full_like(x, 0.3))
    assert low > 0 and high == pytest.approx(0.0, abs=1e-12)
    hh, ww = np.mgrid[:32, :32]
    low, high = freq_terms(torch.from_numpy(0.3 * (-1.0) ** (hh + ww))[None])
    assert high > 0 and low < 1e-3 * high


def test_rec_loss_nonnegative_and_zero_iff_equal():
    g = torch.Generator().manual_seed(2)
    for _ in range(20):
        x, y = torch.rand(2, 4, 8, 8, generator=g), torch.rand(2, 4, 8, 8, generator=g)
        for kind in BranchKind:
            assert rec_loss(x, y, kind, 3.0, 0.5) > 0
    with pytest.raises(ValueError):
        rec_loss(x, y, "low", 5, -1.0)


def test_rec_loss_per_sample():
    x = torch.zeros(3, 2, 4, 4)
    y = torch.stack([torch.zeros(2, 4, 4), torch.ones(2, 4, 4), 2 * torch.ones(2, 4, 4)])
    per = rec_loss(x, y, "fused", 5, 0.0, reduce=False)
    assert per.tolist() == [0.0, 1.0, 2.0]


def test_branches_hold_disjoint_weights():
    model = Detector((2, 8, 8), SMALL, "dual", seed=0)
    low_ids = {id(p) for p in list(model.aes["low"].parameters()) + list(model.heads["low"].parameters())}
    high_ids = {id(p) for p in list(model.aes["high"].parameters()) + list(model.heads["high"].parameters())}
    assert not low_ids & high_ids

    before = {k: v.clone() for k, v in model.state_dict().items() if ".high" in k or k.startswith("aes.high")}
    opt = torch.optim.SGD(list(model.aes["low"].parameters()) + list(model.heads["low"].parameters()), lr=0.1)
    x = torch.rand(4, 2, 8, 8)
    out = model(x, x, x)
    out["low"].x_tilde.square().mean().backward()
    opt.step()
    after = model.state_dict()
    assert before and all(torch.equal(v, after[k]) for k, v in before.items())
