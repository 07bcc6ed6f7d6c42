"""Detection metrics, score tables and visual reports."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

SCORE_COLUMNS = ("source_id", "label", "score_fused", "score_low", "score_high")
BRANCHES = ("low", "high", "fused")


@dataclass
class ScoreRow:
    source_id: str
    label: str
    score_fused: float
    score_low: float
    score_high: float


def _binary(labels) -> np.ndarray:
    y = np.asarray([l == "anomalous" if isinstance(l, str) else bool(l) for l in labels], dtype=bool)
    if y.all() or not y.any():
        raise ValueError("both normal and anomalous samples are required")
    return y


def auroc(scores, labels) -> float:
    """Mann-Whitney form of the ROC area; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    r = rankdata(s)  # average ranks, exact multiples of 1/2
    n1, n0 = int(y.sum()), int((~y).sum())
    u = r[y].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def confusion(scores, labels, threshold: float) -> dict:
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    pred = s >= threshold
    return {"tp": int((pred & y).sum()), "fp": int((pred & ~y).sum()),
            "tn": int((~pred & ~y).sum()), "fn": int((~pred & y).sum())}


def acc_f1_at_best_threshold(scores, labels):
    """Best-F1 threshold among midpoints of consecutive distinct scores.

    The lowest score is also a candidate (everything flagged), which is the
    only one when all scores tie. Ties in F1 go to the larger threshold.
    Returns (acc, f1, threshold).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    uniq = np.unique(s)
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    # adjacent floats: the midpoint can round onto the lower score, so use the upper one
    mids = np.where(mids > uniq[:-1], mids, uniq[1:])
    cands = np.concatenate([[uniq[0]], mids])

    order = np.argsort(s)
    s_sorted, y_sorted = s[order], y[order]
    # predictions positive for s >= t: count from the top
    first = np.searchsorted(s_sorted, cands, side="left")
    pos_tail = np.concatenate([np.cumsum(y_sorted[::-1])[::-1], [0]])
    n = len(s)
    tp = pos_tail[first]
    pp = n - first
    fp = pp - tp
    P = int(y.sum())
    fn = P - tp
    tn = (n - P) - fp
    f1 = np.where(2 * tp + fp + fn > 0, 2 * tp / np.maximum(2 * tp + fp + fn, 1), 0.0)
    best = np.flatnonzero(f1 == f1.max())[-1]
    acc = (tp[best] + tn[best]) / n
    return float(acc), float(f1[best]), float(cands[best])


@dataclass
class AnomalyReport:
    rows: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def column(self, branch: str) -> np.ndarray:
        return np.array([getattr(r, f"score_{branch}") for r in self.rows], dtype=np.float64)

    @property
    def labels(self) -> list[str]:
        return [r.label for r in self.rows]


def evaluate(rows, metadata: dict | None = None) -> AnomalyReport:
    rep = AnomalyReport(list(rows), {}, dict(metadata or {}))
    labels = rep.labels
    for branch in BRANCHES:
        s = rep.column(branch)
        if np.isnan(s).all():
            continue
        acc, f1, thr = acc_f1_at_best_threshold(s, labels)
        rep.metrics[branch] = {"auc": auroc(s, labels), "acc": acc, "f1": f1, "threshold": thr}
    rep.metrics["threshold_policy"] = "best-F1 sweep over score midpoints; score >= threshold flags an anomaly"
    return rep


def write_scores(path: str | os.PathLike, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SCORE_COLUMNS)
        for r in rows:
            w.writerow([r.source_id, r.label, *(repr(float(v)) for v in (r.score_fused, r.score_low, r.score_high))])


def read_scores(path: str | os.PathLike) -> list:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != SCORE_COLUMNS:
            raise DataError(f"{path}: expected columns {SCORE_COLUMNS}, got {reader.fieldnames}")
        return [ScoreRow(r["source_id"], r["label"], float(r["score_fused"]), float(r["score_low"]),
                     float(r["score_high"])) for r in reader]


def write_summary(path: str | os.PathLike, report: AnomalyReport) -> None:
    Path(path).write_text(json.dumps({"metrics": report.metrics, "metadata": report.metadata}, indent=2))


# --- score densities -----------------------------------------------------------


def score_density_report(report: AnomalyReport, n_bins: int = 30, log_scale: bool = False) -> dict:
    """Histogram of each branch's scores split by label.

    Bins span the branch's min..max over all rows (of log10 scores when
    ``log_scale``). Returns ``{branch: {"edges", "normal", "anomalous"}}``
    where the label entries are raw counts.
    """
    if not report.rows:
        raise ValueError("empty report")
    labels = np.array(report.labels)
    out = {}
    for branch in BRANCHES:
        s = report.column(branch)
        if np.isnan(s).all():
            continue
        if log_scale:
            s = np.log10(np.maximum(s, 1e-300))
        lo, hi = float(np.nanmin(s)), float(np.nanmax(s))
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, n_bins + 1)
        out[branch] = {"edges": edges}
        for lab in ("normal", "anomalous"):
            out[branch][lab] = np.histogram(s[labels == lab], bins=edges)[0]
    return out


def histogram_overlap(hist: dict) -> float:
    """Shared probability mass of the normal and anomalous histograms."""
    a, b = hist["normal"], hist["anomalous"]
    if a.sum() == 0 or b.sum() == 0:
        return 0.0
    return float(np.minimum(a / a.sum(), b / b.sum()).sum())


def write_density(path: str | os.PathLike, density: dict) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["branch", "label", "bin_index", "bin_lo", "bin_hi", "count", "density"])
        for branch, h in density.items():
            e = h["edges"]
            for lab in ("normal", "anomalous"):
                c = h[lab]
                tot = max(int(c.sum()), 1)
                for i in range(len(c)):
                    w.writerow([branch, lab, i, f"{e[i]:.8g}", f"{e[i + 1]:.8g}", int(c[i]), f"{c[i] / tot:.8g}"])


# --- reconstruction report ------------------------------------------------------


def _to_png(path: Path, arr: np.ndarray) -> None:
    from PIL import Image

    planes = np.clip(np.nan_to_num(arr, nan=0.0), 0.0, 1.0)
    grid = np.concatenate(list(planes), axis=1) if planes.ndim == 3 else planes
    Image.fromarray(np.round(grid * 255).astype(np.uint8), mode="L").save(path)


def reconstruction_views(ck, data: np.ndarray) -> dict:
    """Inputs, bands and reconstructions of each sample as numpy arrays."""
    import torch
    from .training import prepare_inputs

    model = ck.build()
    x, xl, xh = prepare_inputs(data, ck.train_config.D)
    with torch.no_grad():
        out = model(x, xl, xh)
    views = {"original": x.numpy(), "x_lpf": xl.numpy(), "x_hpf": xh.numpy()}
    for name, key in (("low", "x_tilde_l"), ("high", "x_tilde_h"), ("full", "x_tilde_f"), ("fused", "x_tilde_f")):
        if name in out:
            views[key] = out[name].x_tilde.numpy()
    return views


def reconstruction_report(ck, samples, out_dir: str | os.PathLike, n_bins: int = 16) -> list[Path]:
    """Write per-sample grayscale grids (packets side by side) and radial power profiles."""
    from .spectral import power_spectrum_profile

    data = np.stack([s.data for s in samples]) if not isinstance(samples, np.ndarray) else samples
    ids = [getattr(s, "source_id", "") or f"s{i:03d}" for i, s in enumerate(samples)] \
        if not isinstance(samples, np.ndarray) else [f"s{i:03d}" for i in range(len(samples))]
    if len(data) > 64:
        raise ValueError("reconstruction reports are limited to 64 samples")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    views = reconstruction_views(ck, data)
    written = []
    for i, sid in enumerate(ids):
        profiles = {}
        for name, arr in views.items():
            p = out / f"{sid}_{name}.png"
            _to_png(p, arr[i])
            written.append(p)
            centers, profiles[name] = power_spectrum_profile(arr[i][None], n_bins)
        p = out / f"{sid}_profiles.csv"
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_index", "radial_center", *profiles])
            for b in range(n_bins):
                w.writerow([b, f"{centers[b]:.6g}", *(f"{profiles[k][b]:.8g}" for k in profiles)])
        written.append(p)
    return written


def profile_distance(a, b) -> float:
    return float(np.sqrt(np.sum((np.asarray(a) - np.asarray(b)) ** 2)))


def aggregate_runs(metric_dicts: Sequence[dict]) -> dict:
    """Mean and stddev of each numeric metric across independent runs."""
    keys = sorted({k for d in metric_dicts for k, v in d.items() if isinstance(v, (int, float))})
    return {k: {"mean": float(np.mean([d[k] for d in metric_dicts])),
                "std": float(np.std([d[k] for d in metric_dicts]))} for k in keys}
