"""Seeded synthetic traffic-image corpus for desk-scale experiments.

Normal samples of class k are ``template_k + texture_k + noise``: a smooth
low-frequency template, a fixed high-frequency grating texture, and small i.i.d. noise,
quantized to byte levels. Anomalies keep the class template and texture but add a
fresh random grating texture on top (``anomaly="high"``), distort the template
(``"low"``), or both.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .ingest import DatasetManifest, TrafficSample, write_dataset


@dataclass
class SynthSpec:
    P: int = 8
    H: int = 32
    W: int = 32
    n_classes: int = 4
    n_blobs: int = 3
    blob_sigma: tuple[float, float] = (4.0, 8.0)
    texture_amp: float = 0.12
    n_gratings: int = 3
    texture_band: tuple[float, float] = (7.0, 14.0)
    noise_std: float = 0.02
    jitter: float = 0.02
    anomaly: str = "high"  # high | low | both
    anomaly_strength: float = 1.0
    quantize: bool = True


def _grating_texture(rng, spec: SynthSpec) -> np.ndarray:
    """Sum of sinusoidal gratings with radial frequency in ``spec.texture_band`` (cycles per image)."""
    hh, ww = np.mgrid[: spec.H, : spec.W]
    t = np.zeros((spec.P, spec.H, spec.W))
    for p in range(spec.P):
        for _ in range(spec.n_gratings):
            r = rng.uniform(*spec.texture_band)
            th = rng.uniform(0, np.pi)
            fu, fv = r * np.cos(th) / spec.H, r * np.sin(th) / spec.W
            t[p] += np.cos(2 * np.pi * (fu * hh + fv * ww) + rng.uniform(0, 2 * np.pi))
    return t / t.std(axis=(1, 2), keepdims=True)


def _blob_template(rng, spec: SynthSpec) -> np.ndarray:
    hh, ww = np.mgrid[: spec.H, : spec.W]
    out = np.zeros((spec.P, spec.H, spec.W))
    for p in range(spec.P):
        for _ in range(spec.n_blobs):
            cy, cx = rng.uniform(0, spec.H), rng.uniform(0, spec.W)
            s = rng.uniform(*spec.blob_sigma)
            out[p] += rng.uniform(-1, 1) * np.exp(-((hh - cy) ** 2 + (ww - cx) ** 2) / (2 * s * s))
    # every plane has mean 0.5 and range within [0.25, 0.75]: classes differ in shape, not brightness
    out = out - out.mean(axis=(1, 2), keepdims=True)
    return 0.5 + 0.25 * out / np.maximum(np.abs(out).max(axis=(1, 2), keepdims=True), 1e-9)


class SyntheticTraffic:
    def __init__(self, spec: SynthSpec | None = None, seed: int = 0):
        self.spec = spec or SynthSpec()
        if self.spec.anomaly not in ("high", "low", "both"):
            raise ValueError(f"unknown anomaly mode {self.spec.anomaly!r}")
        rng = np.random.default_rng([seed, 0])
        self.templates = [_blob_template(rng, self.spec) for _ in range(self.spec.n_classes)]
        self.textures = [_grating_texture(rng, self.spec) for _ in range(self.spec.n_classes)]

    def sample(self, rng, anomalous: bool = False) -> np.ndarray:
        s = self.spec
        k = int(rng.integers(s.n_classes))
        template = self.templates[k] * (1 + s.jitter * rng.uniform(-1, 1))
        texture = self.textures[k]
        if anomalous and s.anomaly in ("high", "both"):
            # the class texture stays; an unseen high-frequency pattern rides on top
            texture = texture + s.anomaly_strength * _grating_texture(rng, s)
        if anomalous and s.anomaly in ("low", "both"):
            template = template + s.anomaly_strength * (_blob_template(rng, s) - 0.5)
        amp = s.texture_amp * (1 + s.jitter * rng.uniform(-1, 1))
        x = template + amp * texture + s.noise_std * rng.standard_normal(texture.shape)
        x = np.clip(x, 0.0, 1.0)
        if s.quantize:
            x = np.round(x * 255.0) / 255.0
        return x.astype(np.float32)

    def generate(self, n_normal: int, n_anomalous: int, seed: int = 0) -> list[TrafficSample]:
        """Normals first, then anomalies; each sample gets its own child stream."""
        if n_normal < 0 or n_anomalous < 0:
            raise ValueError("sample counts must be >= 0")
        out = []
        for i in range(n_normal + n_anomalous):
            anom = i >= n_normal
            rng = np.random.default_rng([seed, 1, i])
            out.append(TrafficSample(self.sample(rng, anom), "anomalous" if anom else "normal", f"syn{i:06d}"))
        return out


def synth_samples(n_normal: int, n_anomalous: int, seed: int = 0, spec: SynthSpec | None = None):
    return SyntheticTraffic(spec, seed).generate(n_normal, n_anomalous, seed)


def synth_corpus(n_normal: int, n_anomalous: int, seed: int, spec: SynthSpec | None = None,
                 out_dir: str | os.PathLike = "synthetic") -> DatasetManifest:
    return write_dataset(synth_samples(n_normal, n_anomalous, seed, spec), out_dir)
