"""Normal-Inverse-Gamma heads and their losses.

One (v, alpha, beta) triple is predicted per sample; residuals are taken per
element and the triple is broadcast over them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import DivergenceError

V_FLOOR = 1e-6
ALPHA_FLOOR = 1e-6
BETA_FLOOR = 1e-6


@dataclass
class NIGParams:
    v: torch.Tensor
    alpha: torch.Tensor
    beta: torch.Tensor

    def check(self) -> "NIGParams":
        ok = (torch.isfinite(self.v).all() and torch.isfinite(self.alpha).all() and torch.isfinite(self.beta).all()
              and (self.v >= V_FLOOR).all() and (self.alpha >= 1 + ALPHA_FLOOR).all()
              and (self.beta >= BETA_FLOOR).all())
        if not ok:
            raise ValueError("NIG parameters violate positivity floors or are non-finite")
        return self

    def detach(self) -> "NIGParams":
        return NIGParams(self.v.detach(), self.alpha.detach(), self.beta.detach())


def nig_from_raw(raw: torch.Tensor) -> NIGParams:
    """Map raw (..., 3) outputs through softplus onto the constrained parameters."""
    if not torch.isfinite(raw).all():
        raise DivergenceError("evidential head produced non-finite outputs")
    sp = F.softplus(raw)
    return NIGParams(sp[..., 0] + V_FLOOR, 1.0 + sp[..., 1] + ALPHA_FLOOR, sp[..., 2] + BETA_FLOOR)


class EvidentialHead(nn.Module):
    """A single affine map from the flattened reconstruction to three raw outputs."""

    def __init__(self, n_inputs: int, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.linear = nn.Linear(n_inputs, 3)

    def forward(self, x_tilde: torch.Tensor) -> NIGParams:
        return nig_from_raw(self.linear(x_tilde.flatten(start_dim=1)))


def predict_nig(x_tilde: torch.Tensor, head: EvidentialHead) -> NIGParams:
    """Parameters for one P x H x W reconstruction or a batch of them."""
    if x_tilde.dim() == 3:
        p = head(x_tilde[None])
        return NIGParams(p.v[0], p.alpha[0], p.beta[0])
    return head(x_tilde)


def uncertainty(p: NIGParams) -> torch.Tensor:
    """Epistemic variance of the mean, beta / (v (alpha - 1))."""
    return p.beta / (p.v * (p.alpha - 1.0))


def _bcast(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype)
    return t.reshape(t.shape + (1,) * (like.dim() - t.dim()))


def _reduce(t: torch.Tensor, lead: int, reduce: bool) -> torch.Tensor:
    if reduce or t.dim() <= lead:
        return t.mean()
    return t.mean(dim=tuple(range(lead, t.dim())))


def nll_loss(x, x_tilde, p: NIGParams, reduce: bool = True) -> torch.Tensor:
    """Student-t marginal negative log likelihood, averaged over elements.

    With ``reduce=False`` returns one value per entry of ``p`` (per sample).
    """
    if x.shape != x_tilde.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_tilde.shape)}")
    v, a, b = (_bcast(t, x_tilde) for t in (p.v, p.alpha, p.beta))
    omega = 2.0 * b * (1.0 + v)
    nll = (0.5 * torch.log(math.pi / v)
           - a * torch.log(omega)
           + torch.lgamma(a) - torch.lgamma(a + 0.5)
           + (a + 0.5) * torch.log((x - x_tilde) ** 2 * v + omega))
    return _reduce(nll, torch.as_tensor(p.v).dim(), reduce)


def pen_loss(x, x_tilde, p: NIGParams, reduce: bool = True) -> torch.Tensor:
    """Mean absolute residual scaled by the total evidence 2v + alpha."""
    if x.shape != x_tilde.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_tilde.shape)}")
    v, a = _bcast(p.v, x_tilde), _bcast(p.alpha, x_tilde)
    return _reduce((x - x_tilde).abs() * (2.0 * v + a), torch.as_tensor(p.v).dim(), reduce)
