"""Frequency-specific convolutional autoencoders and the reconstruction loss."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
from torch import nn

from .spectral import gaussian_masks

_ACTIVATIONS = {"relu": nn.ReLU, "leaky_relu": nn.LeakyReLU, "gelu": nn.GELU, "tanh": nn.Tanh}


class BranchKind(str, enum.Enum):
    low = "low"
    high = "high"
    fused = "fused"


@dataclass
class AEConfig:
    in_planes: int = 8
    widths: list[int] = field(default_factory=lambda: [32, 64, 128])
    latent: int = 128
    attention: bool = True
    activation: str = "leaky_relu"
    seed: int = 0

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if not self.widths or min(self.widths) < 1 or self.latent < 1 or self.in_planes < 1:
            raise ValueError(f"invalid AEConfig {self}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def check_shape(self, H: int, W: int) -> None:
        k = 2 ** len(self.widths)
        if H % k or W % k:
            raise ValueError(f"H, W = {H}, {W} must be divisible by {k} for {len(self.widths)} stages")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BranchOutput:
    ae_out: torch.Tensor
    x_tilde: torch.Tensor
    kind: BranchKind
    nig: Optional[object] = None  # evidential.NIGParams once a head has run


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, ratio: int = 8):
        super().__init__()
        hidden = max(channels // ratio, 1)
        self.mlp = nn.Sequential(nn.Linear(channels, hidden, bias=False), nn.ReLU(),
                                 nn.Linear(hidden, channels, bias=False))

    def gate(self, x):
        avg = self.mlp(x.mean(dim=(2, 3)))
        mx = self.mlp(x.amax(dim=(2, 3)))
        return torch.sigmoid(avg + mx)[:, :, None, None]

    def forward(self, x):
        return x * self.gate(x)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def gate(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, x):
        return x * self.gate(x)


class CSAttention(nn.Module):
    """Channel gating followed by spatial gating."""

    def __init__(self, channels: int):
        super().__init__()
        self.channel = ChannelAttention(channels)
        self.spatial = SpatialAttention()

    def forward(self, x):
        return self.spatial(self.channel(x))


class FrequencyAE(nn.Module):
    """Stride-2 conv encoder/decoder; output has the input's shape and is not squashed."""

    def __init__(self, cfg: AEConfig):
        super().__init__()
        self.cfg = cfg
        act = _ACTIVATIONS[cfg.activation]
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            enc, chans = [], cfg.in_planes
            for w in cfg.widths:
                enc += [nn.Conv2d(chans, w, 3, stride=2, padding=1), act()]
                if cfg.attention:
                    enc.append(CSAttention(w))
                chans = w
            enc.append(nn.Conv2d(chans, cfg.latent, 1))
            self.encoder = nn.Sequential(*enc)

            dec, chans = [nn.Conv2d(cfg.latent, cfg.widths[-1], 1), act()], cfg.widths[-1]
            outs = list(reversed(cfg.widths[:-1])) + [cfg.widths[0]]
            for i, w in enumerate(outs):
                dec += [nn.ConvTranspose2d(chans, w, 3, stride=2, padding=1, output_padding=1), act()]
                if cfg.attention and i < len(outs) - 1:
                    dec.append(CSAttention(w))
                chans = w
            dec.append(nn.Conv2d(chans, cfg.in_planes, 3, padding=1))
            self.decoder = nn.Sequential(*dec)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.cfg.in_planes:
            raise ValueError(f"expected (B, {self.cfg.in_planes}, H, W), got {tuple(x.shape)}")
        self.cfg.check_shape(*x.shape[-2:])
        return self.decoder(self.encoder(x))


def ae_forward(ae: FrequencyAE, x_band: torch.Tensor) -> torch.Tensor:
    """Evaluation-mode forward pass; accepts a single P x H x W band or a batch."""
    single = x_band.dim() == 3
    was_training = ae.training
    ae.eval()
    with torch.no_grad():
        out = ae(x_band[None] if single else x_band)
    ae.train(was_training)
    return out[0] if single else out


def integrate_complement(ae_out: torch.Tensor, complement_band: torch.Tensor,
                         via_frequency: bool = False) -> torch.Tensor:
    """Add the untouched opposite input band to an AE output.

    The frequency path (transform, add, invert) equals the spatial sum up to
    rounding, so training uses the sum.
    """
    if ae_out.shape != complement_band.shape:
        raise ValueError(f"shape mismatch {tuple(ae_out.shape)} vs {tuple(complement_band.shape)}")
    if via_frequency:
        F = torch.fft.fft2(ae_out) + torch.fft.fft2(complement_band)
        return torch.fft.ifft2(F).real
    return ae_out + complement_band


_mask_cache: dict = {}


def band_mask(kind: BranchKind, H: int, W: int, D: float, dtype=torch.float32) -> Optional[torch.Tensor]:
    """Centered mask for a branch kind; None means the identity mask."""
    kind = BranchKind(kind)
    if kind is BranchKind.fused:
        return None
    key = (kind, H, W, float(D), dtype)
    if key not in _mask_cache:
        m = gaussian_masks(H, W, D)
        _mask_cache[key] = torch.as_tensor(m.lpf if kind is BranchKind.low else m.hpf, dtype=dtype)
    return _mask_cache[key]


def _centered_fft(x):
    return torch.fft.fftshift(torch.fft.fft2(x), dim=(-2, -1))


def rec_loss(x: torch.Tensor, x_tilde: torch.Tensor, kind=BranchKind.fused, D: float = 5.0,
             lambda_f: float = 1e-2, reduce: bool = True) -> torch.Tensor:
    """Mean-L1 spatial error plus lambda_f times mean |Re|+|Im| of the masked spectral error.

    With ``reduce=False`` the loss is returned per leading (batch) index.
    """
    if x.shape != x_tilde.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_tilde.shape)}")
    if lambda_f < 0:
        raise ValueError("lambda_f must be >= 0")
    dims = tuple(range(1, x.dim())) if not reduce and x.dim() > 1 else tuple(range(x.dim()))
    diff = x - x_tilde
    loss = diff.abs().mean(dim=dims)
    if lambda_f > 0:
        # masking is linear, so masking the spectrum of the difference is the same
        delta = _centered_fft(diff)
        mask = band_mask(kind, x.shape[-2], x.shape[-1], D, dtype=x.dtype)
        if mask is not None:
            delta = delta * mask
        loss = loss + lambda_f * (delta.real.abs() + delta.imag.abs()).mean(dim=dims)
    return loss
