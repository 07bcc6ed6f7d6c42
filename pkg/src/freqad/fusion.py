"""Closed-form summation of two NIG views and the fused anomaly score."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .evidential import NIGParams, uncertainty
from .model import BranchOutput


@dataclass
class FusedEvidence:
    x_tilde: torch.Tensor
    v: torch.Tensor
    alpha: torch.Tensor
    beta: torch.Tensor

    @property
    def params(self) -> NIGParams:
        return NIGParams(self.v, self.alpha, self.beta)


def _expand(t, like):
    t = torch.as_tensor(t, dtype=like.dtype)
    return t.reshape(t.shape + (1,) * (like.dim() - t.dim()))


def _mean_rest(t, lead: int):
    if t.dim() <= lead:
        return t
    return t.mean(dim=tuple(range(lead, t.dim())))


def nig_sum(x_l, p_l: NIGParams, x_h, p_h: NIGParams) -> FusedEvidence:
    """Fuse two views. The leading dims of ``x`` match the parameter shape.

    The squared view-to-fused discrepancies inside beta are averaged over the
    remaining (element) dims so beta stays one value per sample.
    """
    if x_l.shape != x_h.shape:
        raise ValueError(f"branch shapes differ: {tuple(x_l.shape)} vs {tuple(x_h.shape)}")
    lead = torch.as_tensor(p_l.v).dim()
    v_l, v_h = _expand(p_l.v, x_l), _expand(p_h.v, x_h)
    x_f = (v_l * x_l + v_h * x_h) / (v_l + v_h)
    v_f = p_l.v + p_h.v
    alpha_f = p_l.alpha + p_h.alpha + 0.5
    beta_f = (p_l.beta + p_h.beta
              + 0.5 * p_l.v * _mean_rest((x_l - x_f) ** 2, lead)
              + 0.5 * p_h.v * _mean_rest((x_h - x_f) ** 2, lead))
    return FusedEvidence(x_f, v_f, alpha_f, beta_f)


def fuse_nig(low: BranchOutput, high: BranchOutput) -> FusedEvidence:
    if low.nig is None or high.nig is None:
        raise ValueError("both branches need NIG parameters before fusion")
    return nig_sum(low.x_tilde, low.nig, high.x_tilde, high.nig)


def anomaly_score(f: FusedEvidence) -> torch.Tensor:
    return uncertainty(f.params)


def static_fuse(score_l, score_h, mode: str = "weighted_sum", w: float = 0.5):
    """Fixed-rule score combination used as a comparator for the NIG fusion."""
    if mode == "product":
        return score_l * score_h
    if mode == "weighted_sum":
        if not 0.0 <= w <= 1.0:
            raise ValueError("w must lie in [0, 1]")
        return w * score_l + (1.0 - w) * score_h
    raise ValueError(f"unknown static fusion mode {mode!r}")
