"""Joint multi-task training of the two band branches and their fused evidence."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, DataError, DivergenceError
from .evaluation import ScoreRow
from .evidential import EvidentialHead, NIGParams, nll_loss, pen_loss, uncertainty
from .fusion import FusedEvidence, anomaly_score, fuse_nig, static_fuse
from .model import AEConfig, BranchKind, BranchOutput, FrequencyAE, integrate_complement, rec_loss
from .spectral import decouple

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "freqad-checkpoint"
CHECKPOINT_VERSION = 1
MIN_REL_DELTA = 1e-4
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 60
    lambda_nll: float = 1e-2
    lambda_pen: float = 1e-4
    lambda_f: float = 1e-2
    P: int = 8
    D: float = 5.0
    seed: int = 0
    patience: int = 10
    n_runs: int = 5

    def __post_init__(self):
        if min(self.lambda_nll, self.lambda_pen, self.lambda_f) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.P < 1 or self.patience < 1 or self.n_runs < 1:
            raise ValueError("batch_size, max_epochs, P, patience and n_runs must be >= 1")
        if not self.D > 0:
            raise ValueError("D must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


STATIC_MODES = ("product", "weighted_sum")


@dataclass(frozen=True)
class Ablation:
    no_low_branch: bool = False
    no_high_branch: bool = False
    no_decouple: bool = False
    no_freq_loss: bool = False
    static_fusion: Optional[str] = None

    def __post_init__(self):
        if self.no_low_branch and self.no_high_branch:
            raise ValueError("cannot drop both branches")
        if self.no_decouple and (self.no_low_branch or self.no_high_branch):
            raise ValueError("no_decouple already replaces both branches")
        if self.static_fusion is not None:
            if self.static_fusion not in STATIC_MODES:
                raise ValueError(f"static_fusion must be one of {STATIC_MODES}")
            if self.mode != "dual":
                raise ValueError("static fusion needs both branches")

    @property
    def mode(self) -> str:
        if self.no_decouple:
            return "single"
        if self.no_low_branch:
            return "high"
        if self.no_high_branch:
            return "low"
        return "dual"

    @property
    def tag(self) -> str:
        parts = [k for k in ("no_low_branch", "no_high_branch", "no_decouple", "no_freq_loss") if getattr(self, k)]
        if self.static_fusion:
            parts.append(f"static_{self.static_fusion}")
        return "+".join(parts) or "full"

    @classmethod
    def parse(cls, names) -> "Ablation":
        """From CLI tokens such as ``no_decouple`` or ``static_fusion=product``."""
        kw = {}
        for n in names or ():
            if n.startswith("static_fusion"):
                _, _, mode = n.partition("=")
                kw["static_fusion"] = mode or "weighted_sum"
            elif n in ("no_low_branch", "no_high_branch", "no_decouple", "no_freq_loss"):
                kw[n] = True
            else:
                raise ValueError(f"unknown ablation {n!r}")
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


class Detector(nn.Module):
    """Band autoencoders plus evidential heads for one ablation mode."""

    def __init__(self, shape, ae_cfg: AEConfig, mode: str = "dual", seed: int = 0):
        super().__init__()
        P, H, W = shape
        if ae_cfg.in_planes != P:
            raise ValueError(f"AEConfig.in_planes={ae_cfg.in_planes} but samples have P={P}")
        ae_cfg.check_shape(H, W)
        self.shape = tuple(shape)
        self.mode = mode
        self.ae_cfg = ae_cfg
        n = P * H * W
        names = {"dual": ("low", "high"), "low": ("low",), "high": ("high",), "single": ("full",)}[mode]
        offset = {"low": 1, "high": 2, "full": 3}
        self.aes = nn.ModuleDict()
        self.heads = nn.ModuleDict()
        for name in names:
            s = 1000 * seed + offset[name]
            self.aes[name] = FrequencyAE(AEConfig(**{**ae_cfg.to_dict(), "seed": s}))
            self.heads[name] = EvidentialHead(n, seed=s + 100)

    def branch(self, name: str, x_band, complement) -> BranchOutput:
        ae_out = self.aes[name](x_band)
        x_tilde = ae_out if complement is None else integrate_complement(ae_out, complement)
        kind = BranchKind.fused if name == "full" else BranchKind(name)
        return BranchOutput(ae_out, x_tilde, kind, self.heads[name](x_tilde))

    def forward(self, x, x_lpf, x_hpf) -> dict:
        out = {}
        if self.mode == "single":
            out["full"] = self.branch("full", x, None)
            return out
        if "low" in self.aes:
            out["low"] = self.branch("low", x_lpf, x_hpf)
        if "high" in self.aes:
            out["high"] = self.branch("high", x_hpf, x_lpf)
        if self.mode == "dual":
            out["fused"] = fuse_nig(out["low"], out["high"])
        return out


def prepare_inputs(data: np.ndarray, D: float):
    """Input-side band split; carries no gradient so it is done once up front."""
    data = np.asarray(data, dtype=np.float32)
    bands = decouple(data, D)
    as_t = lambda a: torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))
    return as_t(data), as_t(bands.x_lpf), as_t(bands.x_hpf)


def branch_loss(x, x_tilde, nig: NIGParams, kind, cfg: TrainConfig, lambda_f: Optional[float] = None,
                reduce: bool = True):
    """Reconstruction plus weighted evidential terms for one branch."""
    lf = cfg.lambda_f if lambda_f is None else lambda_f
    loss = rec_loss(x, x_tilde, kind, cfg.D, lf, reduce=reduce)
    if cfg.lambda_nll:
        loss = loss + cfg.lambda_nll * nll_loss(x, x_tilde, nig, reduce=reduce)
    if cfg.lambda_pen:
        loss = loss + cfg.lambda_pen * pen_loss(x, x_tilde, nig, reduce=reduce)
    if not torch.isfinite(loss).all():
        raise DivergenceError("non-finite branch loss")
    return loss


def total_loss(x, low: BranchOutput, high: BranchOutput, fused: FusedEvidence, cfg: TrainConfig,
               lambda_f: Optional[float] = None, reduce: bool = True):
    return (branch_loss(x, low.x_tilde, low.nig, BranchKind.low, cfg, lambda_f, reduce)
            + branch_loss(x, high.x_tilde, high.nig, BranchKind.high, cfg, lambda_f, reduce)
            + branch_loss(x, fused.x_tilde, fused.params, BranchKind.fused, cfg, lambda_f, reduce))


def objective(model: Detector, x, x_lpf, x_hpf, cfg: TrainConfig, ablation: Ablation):
    """Batch-mean training loss for whichever graph the ablation selects."""
    lf = 0.0 if ablation.no_freq_loss else cfg.lambda_f
    out = model(x, x_lpf, x_hpf)
    if model.mode == "dual":
        return total_loss(x, out["low"], out["high"], out["fused"], cfg, lf)
    (b,) = out.values()
    return branch_loss(x, b.x_tilde, b.nig, b.kind, cfg, lf)


@dataclass
class TrainState:
    epoch: int = 0
    best_loss: float = float("inf")
    bad_epochs: int = 0
    history: list = field(default_factory=list)
    model: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    best_model: dict = field(default_factory=dict)
    seed: int = 0
    done: bool = False


def config_hash(cfg: TrainConfig, ae_cfg: AEConfig, ablation: Ablation) -> str:
    blob = json.dumps([cfg.to_dict(), ae_cfg.to_dict(), ablation.to_dict()], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    shape: tuple
    train_config: TrainConfig
    ae_config: AEConfig
    ablation: Ablation
    weights: dict
    state: Optional[TrainState] = None

    def build(self) -> Detector:
        model = Detector(self.shape, self.ae_config, self.ablation.mode, self.train_config.seed)
        try:
            model.load_state_dict(self.weights, strict=True)
        except RuntimeError as e:
            raise CheckpointError(f"checkpoint weights do not fit the model: {e}") from e
        model.eval()
        return model

    @property
    def history(self) -> list:
        return list(self.state.history) if self.state else []

    @property
    def config_hash(self) -> str:
        return config_hash(self.train_config, self.ae_config, self.ablation)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "shape": list(self.shape),
            "train_config": self.train_config.to_dict(),
            "ae_config": self.ae_config.to_dict(),
            "ablation": self.ablation.to_dict(),
            "optimizer": {"name": "adam", "betas": list(ADAM_BETAS), "eps": ADAM_EPS},
            "weights": self.weights,
            "state": asdict(self.state) if self.state else None,
        }, path)
        return path

    @classmethod
    def load(cls, path: str | os.PathLike, expected_shape=None) -> "Checkpoint":
        try:
            doc = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
        if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
        ck = cls(tuple(doc["shape"]), TrainConfig.from_dict(doc["train_config"]),
                 AEConfig(**doc["ae_config"]), Ablation(**doc["ablation"]), doc["weights"],
                 TrainState(**doc["state"]) if doc.get("state") else None)
        if expected_shape is not None and tuple(expected_shape) != ck.shape:
            raise CheckpointError(f"checkpoint expects samples of shape {ck.shape}, got {tuple(expected_shape)}")
        ck.build()  # surfaces incompatible weights at load time
        return ck


def _train_arrays(train) -> np.ndarray:
    if hasattr(train, "load_arrays"):
        data, labels, _ = train.load_arrays()
    elif isinstance(train, tuple):
        data, labels = train
    else:
        data, labels = train, None
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 4 or len(data) == 0:
        raise DataError("training needs a non-empty (N, P, H, W) sample stack")
    if labels is not None and any(l == "anomalous" for l in labels):
        raise DataError("zero-positive training: the train set contains anomalous samples")
    return data


def train(train_set, cfg: TrainConfig | None = None, ablation: Ablation | None = None,
          ae_cfg: AEConfig | None = None, resume: Checkpoint | None = None,
          stop_after: Optional[int] = None, on_epoch: Optional[Callable[[int, float], None]] = None) -> Checkpoint:
    """Fit a detector on normal samples and return the best-loss checkpoint.

    ``train_set`` is a DatasetManifest, an (N, P, H, W) array, or a
    ``(array, labels)`` pair. ``stop_after`` halts after that many total epochs
    (the returned checkpoint can be resumed); it is not early stopping.
    """
    data = _train_arrays(train_set)
    shape = data.shape[1:]
    if resume is not None:
        cfg, ae_cfg, ablation = resume.train_config, resume.ae_config, resume.ablation
        if resume.shape != tuple(shape):
            raise CheckpointError(f"checkpoint shape {resume.shape} != data shape {tuple(shape)}")
    cfg = cfg or TrainConfig()
    ablation = ablation or Ablation()
    if shape[0] != cfg.P:
        raise DataError(f"samples have P={shape[0]} but config says P={cfg.P}")
    ae_cfg = ae_cfg or AEConfig(in_planes=cfg.P)

    x_all, xl_all, xh_all = prepare_inputs(data, cfg.D)
    model = Detector(shape, ae_cfg, ablation.mode, cfg.seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)

    state = TrainState(seed=cfg.seed)
    if resume is not None and resume.state is not None:
        state = copy.deepcopy(resume.state)
        model.load_state_dict(state.model)
        opt.load_state_dict(state.optimizer)
    if not state.best_model:
        state.best_model = copy.deepcopy(model.state_dict())

    n = len(data)
    last = cfg.max_epochs if stop_after is None else min(stop_after, cfg.max_epochs)
    while not state.done and state.epoch < last:
        perm = torch.from_numpy(np.random.default_rng([cfg.seed, state.epoch]).permutation(n))
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            loss = objective(model, x_all[idx], xl_all[idx], xh_all[idx], cfg, ablation)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        mean = total / n
        state.history.append(mean)
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(state.epoch, mean)
        log.info("[%s] epoch %d loss %.6f", ablation.tag, state.epoch, mean)

        if state.best_loss == float("inf") or state.best_loss - mean >= MIN_REL_DELTA * abs(state.best_loss):
            state.best_loss = mean
            state.bad_epochs = 0
            state.best_model = copy.deepcopy(model.state_dict())
        else:
            state.bad_epochs += 1
            if state.bad_epochs >= cfg.patience:
                log.info("[%s] early stop at epoch %d", ablation.tag, state.epoch)
                state.done = True
    if state.epoch >= cfg.max_epochs:
        state.done = True

    state.model = copy.deepcopy(model.state_dict())
    state.optimizer = copy.deepcopy(opt.state_dict())
    return Checkpoint(tuple(shape), cfg, ae_cfg, ablation, state.best_model, state)


def score_arrays(ck: Checkpoint, data: np.ndarray, batch_size: int = 256, model: Detector | None = None) -> dict:
    """Per-sample scores as arrays: ``fused``, ``low`` and ``high`` (NaN where a branch is absent)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3:
        data = data[None]
    if tuple(data.shape[1:]) != ck.shape:
        raise DataError(f"samples of shape {tuple(data.shape[1:])} do not match checkpoint shape {ck.shape}")
    model = model or ck.build()
    model.eval()
    x_all, xl_all, xh_all = prepare_inputs(data, ck.train_config.D)
    cols = {"fused": [], "low": [], "high": []}
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            sl = slice(i, i + batch_size)
            out = model(x_all[sl], xl_all[sl], xh_all[sl])
            nan = torch.full((len(x_all[sl]),), float("nan"), dtype=torch.float64)
            low = uncertainty(out["low"].nig).double() if "low" in out else nan
            high = uncertainty(out["high"].nig).double() if "high" in out else nan
            if "fused" in out:
                if ck.ablation.static_fusion:
                    fused = static_fuse(low, high, ck.ablation.static_fusion)
                else:
                    fused = anomaly_score(out["fused"]).double()
            else:
                (b,) = out.values()
                fused = uncertainty(b.nig).double()
            cols["fused"].append(fused)
            cols["low"].append(low)
            cols["high"].append(high)
    return {k: torch.cat(v).numpy() for k, v in cols.items()}


def score_dataset(ck: Checkpoint, samples, batch_size: int = 256) -> list[ScoreRow]:
    """Score a DatasetManifest, a list of TrafficSample, or a bare array (order preserved)."""
    if hasattr(samples, "load_arrays"):
        data, labels, ids = samples.load_arrays()
    elif isinstance(samples, (list, tuple)) and samples and hasattr(samples[0], "data"):
        data = np.stack([s.data for s in samples])
        labels, ids = [s.label for s in samples], [s.source_id for s in samples]
    else:
        data = np.asarray(samples, dtype=np.float32)
        labels, ids = ["unknown"] * len(data), [f"s{i:06d}" for i in range(len(data))]
    s = score_arrays(ck, data, batch_size)
    return [ScoreRow(i, l, float(f), float(lo), float(hi))
            for i, l, f, lo, hi in zip(ids, labels, s["fused"], s["low"], s["high"])]
