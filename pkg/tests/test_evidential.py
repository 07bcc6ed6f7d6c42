import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from freqad.errors import DivergenceError
from freqad.evidential import (
    ALPHA_FLOOR, BETA_FLOOR, V_FLOOR, EvidentialHead, NIGParams, nig_from_raw, nll_loss, pen_loss,
    predict_nig, uncertainty,
)


def t(*v):
    return torch.tensor(v, dtype=torch.float64)


def nig(v, a, b):
    return NIGParams(t(v), t(a), t(b))


def test_raw_zero_gives_ln2():
    p = nig_from_raw(torch.zeros(1, 3, dtype=torch.float64))
    ln2 = math.log(2.0)
    assert p.v.item() == pytest.approx(ln2 + V_FLOOR, abs=1e-12)
    assert p.alpha.item() == pytest.approx(1 + ln2 + ALPHA_FLOOR, abs=1e-12)
    assert p.beta.item() == pytest.approx(ln2 + BETA_FLOOR, abs=1e-12)


def test_raw_very_negative_hits_floors():
    p = nig_from_raw(torch.full((1, 3), -200.0, dtype=torch.float64))
    assert p.v.item() == pytest.approx(V_FLOOR, rel=1e-9)
    assert p.alpha.item() == pytest.approx(1 + ALPHA_FLOOR, rel=1e-12)
    assert p.beta.item() == pytest.approx(BETA_FLOOR, rel=1e-9)
    p.check()


def test_non_finite_raw_is_divergence():
    with pytest.raises(DivergenceError):
        nig_from_raw(torch.tensor([[0.0, float("nan"), 0.0]]))


def test_head_batch_shape():
    head = EvidentialHead(2 * 4 * 4, seed=0)
    p = predict_nig(torch.rand(5, 2, 4, 4), head)
    assert p.v.shape == p.alpha.shape == p.beta.shape == (5,)
    single = predict_nig(torch.rand(2, 4, 4), head)
    assert single.v.dim() == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_head_outputs_always_valid(seed, scale):
    head = EvidentialHead(3 * 4 * 4, seed=seed)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for prm in head.parameters():
            prm.mul_(scale)
        predict_nig(torch.randn(6, 3, 4, 4, generator=g) * scale, head).check()


def test_uncertainty_values():
    assert uncertainty(nig(1.0, 2.0, 2.0)).item() == 2.0
    assert uncertainty(nig(1.0, 2.0, 1e-6)).item() == pytest.approx(1e-6)
    base = uncertainty(nig(1.3, 2.5, 0.7)).item()
    assert uncertainty(nig(1.3, 2.5, 1.4)).item() == pytest.approx(2 * base)
    assert uncertainty(nig(2.6, 2.5, 0.7)).item() == pytest.approx(base / 2)


def test_uncertainty_monotone_on_grid():
    g = torch.linspace(0.1, 5, 25, dtype=torch.float64)
    a = 1.0 + g
    assert (torch.diff(uncertainty(NIGParams(torch.ones(25), 2 * torch.ones(25), g))) > 0).all()
    assert (torch.diff(uncertainty(NIGParams(g, 2 * torch.ones(25), torch.ones(25)))) < 0).all()
    assert (torch.diff(uncertainty(NIGParams(torch.ones(25), a, torch.ones(25)))) < 0).all()


def nll_by_hand(r, v, a, b):
    w = 2 * b * (1 + v)
    return (0.5 * math.log(math.pi / v) - a * math.log(w) + math.lgamma(a) - math.lgamma(a + 0.5)
            + (a + 0.5) * math.log(r * r * v + w))


def test_nll_zero_residual_worked_case():
    x = torch.rand(2, 4, 4, dtype=torch.float64)
    val = nll_loss(x, x.clone(), nig(1.0, 2.0, 1.0)).item()
    expect = 0.5 * math.log(math.pi) - 2 * math.log(4) + math.log(1 / 1.329340388) + 2.5 * math.log(4)
    assert val == pytest.approx(expect, abs=1e-8)
    assert val == pytest.approx(0.9808, abs=5e-5)


def test_nll_matches_scalar_formula_and_sign_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v, a, b = rng.uniform(0.1, 5), rng.uniform(1.01, 6), rng.uniform(0.01, 3)
        r = rng.normal(size=(3, 5))
        x = torch.from_numpy(r)
        expect = np.mean([nll_by_hand(ri, v, a, b) for ri in r.ravel()])
        got = nll_loss(x, torch.zeros_like(x), nig(v, a, b)).item()
        assert got == pytest.approx(expect, rel=1e-10)
        assert nll_loss(-x, torch.zeros_like(x), nig(v, a, b)).item() == pytest.approx(got, rel=1e-12)


def test_nll_per_sample_broadcast():
    x = torch.zeros(2, 3, 4, dtype=torch.float64)
    xt = torch.stack([torch.zeros(3, 4), torch.ones(3, 4)]).double()
    p = NIGParams(t(1.0, 2.0), t(2.0, 3.0), t(1.0, 0.5))
    per = nll_loss(x, xt, p, reduce=False)
    assert per.shape == (2,)
    assert per[0].item() == pytest.approx(nll_by_hand(0.0, 1.0, 2.0, 1.0))
    assert per[1].item() == pytest.approx(nll_by_hand(1.0, 2.0, 3.0, 0.5))
    assert nll_loss(x, xt, p).item() == pytest.approx(per.mean().item())


def test_pen_loss_cases():
    x = torch.rand(4, 4, dtype=torch.float64)
    assert pen_loss(x, x, nig(1.0, 2.0, 1.0)).item() == 0.0
    assert pen_loss(x, x + 1, nig(1.0, 2.0, 1.0)).item() == pytest.approx(4.0)
    r = x + 0.3
    vals_v = [pen_loss(x, r, nig(v, 2.0, 1.0)).item() for v in (0.5, 1.0, 2.0)]
    vals_a = [pen_loss(x, r, nig(1.0, a, 1.0)).item() for a in (1.5, 2.0, 3.0)]
    assert vals_v == sorted(vals_v) and len(set(vals_v)) == 3
    assert vals_a == sorted(vals_a) and len(set(vals_a)) == 3


def test_losses_finite_at_extremes():
    x = torch.zeros(2, 2, dtype=torch.float64)
    for v, a, b in [(1e-6, 1 + 1e-6, 1e-6), (1e6, 1e3, 1e6), (1e-6, 50.0, 1e-6)]:
        for r in (0.0, 1e-8, 10.0):
            assert math.isfinite(nll_loss(x, x + r, nig(v, a, b)).item())
            assert math.isfinite(pen_loss(x, x + r, nig(v, a, b)).item())


def test_head_fit_decreases_nll():
    """Training the head alone on fixed residuals lowers the NLL every epoch."""
    g = torch.Generator().manual_seed(0)
    x_tilde = torch.rand(64, 1, 4, 4, generator=g)
    x = x_tilde + 0.05 * torch.randn(64, 1, 4, 4, generator=g)
    head = EvidentialHead(16, seed=0)
    opt = torch.optim.Adam(head.parameters(), lr=1e-2)
    losses = []
    for _ in range(40):
        loss = nll_loss(x, x_tilde, predict_nig(x_tilde, head))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:]))
