"""Per-plane 2-D DFT, Gaussian band masks and low/high frequency decoupling."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import SpectrumError

IMAG_TOL = 1e-5
LOG_EPS = 1e-12


@dataclass
class Spectrum:
    data: np.ndarray  # complex, (..., H, W)
    centered: bool = False

    def natural(self) -> np.ndarray:
        return np.fft.ifftshift(self.data, axes=(-2, -1)) if self.centered else self.data

    def center(self) -> "Spectrum":
        if self.centered:
            return self
        return Spectrum(np.fft.fftshift(self.data, axes=(-2, -1)), True)


@dataclass
class GaussianMasks:
    lpf: np.ndarray
    hpf: np.ndarray
    D: float


@dataclass
class FrequencyBands:
    x_lpf: np.ndarray
    x_hpf: np.ndarray


def dft2(sample: np.ndarray, centered: bool = False) -> Spectrum:
    """Unnormalized forward transform over the last two axes."""
    F = np.fft.fft2(np.asarray(sample, dtype=np.float64), axes=(-2, -1))
    spec = Spectrum(F, False)
    return spec.center() if centered else spec


def idft2(spectrum: Spectrum) -> np.ndarray:
    x = np.fft.ifft2(spectrum.natural(), axes=(-2, -1))
    if x.size and np.abs(x.imag).max() >= IMAG_TOL:
        raise SpectrumError(f"inverse transform has imaginary residue {np.abs(x.imag).max():.3g}")
    return x.real


def radial_distance(H: int, W: int) -> np.ndarray:
    """Distance of each centered-layout bin from the DC bin at (H//2, W//2)."""
    u = np.arange(H) - H // 2
    v = np.arange(W) - W // 2
    return np.sqrt(u[:, None] ** 2 + v[None, :] ** 2)


def gaussian_masks(H: int, W: int, D: float) -> GaussianMasks:
    if not D > 0:
        raise ValueError(f"cutoff D must be positive, got {D}")
    d = radial_distance(H, W)
    lpf = np.exp(-(d ** 2) / (2.0 * D * D))
    return GaussianMasks(lpf, 1.0 - lpf, float(D))


def apply_mask(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    spec = dft2(x, centered=True)
    return idft2(Spectrum(spec.data * mask, True))


def decouple(sample, D: float = 5.0) -> FrequencyBands:
    """Split a sample (or a stack of samples) into complementary spatial bands.

    Accepts a TrafficSample or any array whose last two axes are H x W.
    """
    x = getattr(sample, "data", sample)
    x = np.asarray(x)
    masks = gaussian_masks(x.shape[-2], x.shape[-1], D)
    spec = dft2(x, centered=True)
    x_lpf = idft2(Spectrum(spec.data * masks.lpf, True))
    x_hpf = idft2(Spectrum(spec.data * masks.hpf, True))
    return FrequencyBands(x_lpf, x_hpf)


def power_spectrum_profile(samples: Iterable[np.ndarray], n_bins: int = 16):
    """Mean log10 power per radial bin, averaged over samples.

    Returns (radial_centers, profile), both of length ``n_bins``. Bins split
    [0, d_max] uniformly where d_max is the largest centered-bin distance.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    arr = np.asarray(list(samples) if not isinstance(samples, np.ndarray) else samples, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty sample set")
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[None]
    H, W = arr.shape[-2:]
    d = radial_distance(H, W)
    d_max = d.max()
    idx = np.minimum((d / d_max * n_bins).astype(int), n_bins - 1).ravel()
    counts = np.bincount(idx, minlength=n_bins)

    power = np.abs(dft2(arr, centered=True).data) ** 2  # (N, P, H, W)
    logp = np.log10(power.mean(axis=1) + LOG_EPS).reshape(arr.shape[0], -1)
    sums = np.stack([np.bincount(idx, weights=row, minlength=n_bins) for row in logp])
    with np.errstate(invalid="ignore", divide="ignore"):
        per_sample = sums / counts  # empty bins (very fine binning) come out NaN
    centers = (np.arange(n_bins) + 0.5) * d_max / n_bins
    return centers, per_sample.mean(axis=0)


def write_profile(path: str | os.PathLike, centers, profile) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_index", "radial_center", "mean_log_power"])
        for i, (c, p) in enumerate(zip(centers, profile)):
            w.writerow([i, f"{c:.6g}", f"{p:.8g}"])


def read_profile(path: str | os.PathLike):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return (np.array([float(r["radial_center"]) for r in rows]),
            np.array([float(r["mean_log_power"]) for r in rows]))
