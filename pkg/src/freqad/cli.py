"""Command-line entry point: synth, ingest, spectrum, train, score, eval, report, sweep.

Exit codes: 0 ok, 1 usage, 2 data/shape, 3 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, DivergenceError, FreqADError
from .evaluation import (
    evaluate, read_scores, reconstruction_report, score_density_report, write_density, write_scores, write_summary,
)
from .ingest import DatasetManifest, build_split, flow_to_sample, read_flow_dir, read_hex_flows, write_dataset
from .model import AEConfig
from .spectral import power_spectrum_profile, write_profile
from .synth import SynthSpec, synth_corpus
from .training import Ablation, Checkpoint, TrainConfig, score_dataset, train

log = logging.getLogger("freqad")

OUT_ROOT_ENV = "FREQAD_OUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which here means a data error
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- helpers -----------------------------------------------------------------


def out_dir(args) -> Path:
    p = Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def record_config(out: Path, args, **extra) -> Path:
    """Every run leaves behind what it actually ran with."""
    doc = {"command": args.command, "version": __version__,
           "args": {k: v for k, v in vars(args).items() if k not in ("func", "command")}}
    doc.update(extra)
    path = out / f"effective_config_{args.command}.json"
    path.write_text(json.dumps(doc, indent=2, default=str))
    return path


def load_manifest(path) -> DatasetManifest:
    m = DatasetManifest.load(path)
    if not m.records:
        raise DataError(f"{path}: manifest has no records")
    return m


def resolve_train_config(args, P: int | None = None) -> TrainConfig:
    """Defaults (P from the data), then the config file, then explicit flags on top."""
    base = TrainConfig().to_dict()
    if P is not None:
        base["P"] = P
    if args.config:
        base.update(json.loads(Path(args.config).read_text()))
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    return TrainConfig.from_dict(base)


def resolve_ae_config(args, P: int) -> AEConfig:
    kw = {"in_planes": P}
    if args.widths:
        kw["widths"] = list(args.widths)
    if args.latent:
        kw["latent"] = args.latent
    if args.no_attention:
        kw["attention"] = False
    return AEConfig(**kw)


def absolute_manifest(m: DatasetManifest) -> DatasetManifest:
    """Same records with absolute paths, so the manifest can be saved anywhere."""
    from .ingest import ManifestRecord
    root = m.root.resolve()
    recs = [ManifestRecord(str(root / r.path), r.label, r.source_id) for r in m.records]
    return DatasetManifest(m.P, m.H, m.W, recs, root, m.schema_version)


def try_plot(fn, path: Path):
    """Images are a convenience; the CSV tables next to them are the contract."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    fig, ax = plt.subplots(figsize=(5, 3.5))
    fn(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def print_metrics(metrics: dict, file=None):
    file = file or sys.stdout
    for branch in ("fused", "low", "high"):
        if branch in metrics:
            m = metrics[branch]
            print(f"{branch:6s} auc={m['auc']:.4f} acc={m['acc']:.4f} f1={m['f1']:.4f} threshold={m['threshold']:.6g}",
                  file=file)


# --- commands ----------------------------------------------------------------


def cmd_synth(args):
    out = out_dir(args)
    spec = SynthSpec(P=args.P, H=args.H, W=args.W, anomaly=args.anomaly, anomaly_strength=args.strength)
    m = synth_corpus(args.normal, args.anomalous, args.seed, spec, out)
    record_config(out, args, synth_spec=vars(spec))
    print(f"wrote {len(m)} samples to {out} ({m.counts()})")


def cmd_ingest(args):
    out = out_dir(args)
    flows = []
    for path in args.hex or ():
        flows += read_hex_flows(path)
    for d in args.flow_dir or ():
        flows.append(read_flow_dir(d, args.label))
    if not flows:
        raise UsageError("ingest needs --hex or --flow-dir")
    m = write_dataset((flow_to_sample(f, args.P, args.H, args.W) for f in flows), out)
    record_config(out, args)
    print(f"wrote {len(m)} samples to {out} ({m.counts()})")


def cmd_spectrum(args):
    out = out_dir(args)
    m = load_manifest(args.data)
    data, labels, _ = m.load_arrays()
    labels = np.array(labels)
    written = {}
    groups = {"all": np.ones(len(labels), bool), **{l: labels == l for l in sorted(set(labels))}}
    for name, sel in groups.items():
        centers, prof = power_spectrum_profile(data[sel], args.bins)
        path = out / f"spectrum_{name}.csv"
        write_profile(path, centers, prof)
        written[name] = (centers, prof)

    def draw(ax):
        for name, (c, p) in written.items():
            ax.plot(c, p, marker=".", label=name)
        ax.set_xlabel("radial frequency")
        ax.set_ylabel("mean log10 power")
        ax.legend()
    try_plot(draw, out / "spectrum.png")
    record_config(out, args)
    print(f"wrote {len(written)} radial profiles to {out}")


def _train_split(args, m: DatasetManifest, seed: int):
    if args.train_size is None:
        return m, None
    return build_split(m, args.train_size, seed)


def cmd_train(args):
    out = out_dir(args)
    m = load_manifest(args.data)
    cfg = resolve_train_config(args, m.P)
    ablation = Ablation.parse(args.ablation)
    resume = Checkpoint.load(args.resume, expected_shape=m.shape) if args.resume else None
    train_m, test_m = _train_split(args, m, cfg.seed)
    ae_cfg = resolve_ae_config(args, m.P)

    t0 = time.time()
    ck = train(train_m, cfg, ablation, ae_cfg, resume=resume, stop_after=args.stop_after,
               on_epoch=lambda e, l: log.info("epoch %d loss %.6f", e, l))
    tag = ck.ablation.tag  # on resume the checkpoint's ablation wins
    path = ck.save(out / f"model_{tag}.pt")
    with open(out / f"history_{tag}.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss"])
        w.writerows((i + 1, repr(l)) for i, l in enumerate(ck.history))
    try_plot(lambda ax: (ax.plot(range(1, len(ck.history) + 1), ck.history), ax.set_xlabel("epoch"),
                         ax.set_ylabel("mean total loss")), out / f"history_{tag}.png")
    if test_m is not None:
        absolute_manifest(test_m).save(out / "test_manifest.json")
    record_config(out, args, train_config=ck.train_config.to_dict(), ae_config=ck.ae_config.to_dict(),
                  ablation=ck.ablation.to_dict(), config_hash=ck.config_hash, checkpoint=str(path),
                  epochs=ck.state.epoch, seconds=round(time.time() - t0, 2))
    print(f"trained {tag} for {ck.state.epoch} epochs, final loss {ck.history[-1]:.6f}; saved {path}")


def _score(ck: Checkpoint, m: DatasetManifest, out: Path, do_eval: bool, meta: dict):
    rows = score_dataset(ck, m)
    write_scores(out / "scores.csv", rows)
    if do_eval:
        _evaluate(rows, out, meta)
    return rows


def _evaluate(rows, out: Path, meta: dict, n_bins: int = 30):
    rep = evaluate(rows, meta)
    write_summary(out / "summary.json", rep)
    dens = score_density_report(rep, n_bins)
    write_density(out / "density.csv", dens)

    def draw(ax):
        for branch, h in dens.items():
            mids = 0.5 * (h["edges"][1:] + h["edges"][:-1])
            for lab, ls in (("normal", "-"), ("anomalous", "--")):
                ax.plot(mids, h[lab] / max(h[lab].sum(), 1), ls, label=f"{branch} {lab}")
        ax.set_xlabel("score")
        ax.legend(fontsize=6)
    try_plot(draw, out / "density.png")
    print_metrics(rep.metrics)
    return rep


def cmd_score(args):
    out = out_dir(args)
    m = load_manifest(args.data)
    ck = Checkpoint.load(args.checkpoint, expected_shape=m.shape)
    meta = {"seed": ck.train_config.seed, "config_hash": ck.config_hash, "ablation": ck.ablation.tag}
    rows = _score(ck, m, out, args.eval, meta)
    record_config(out, args, config_hash=ck.config_hash)
    print(f"scored {len(rows)} samples -> {out / 'scores.csv'}")


def cmd_eval(args):
    out = out_dir(args)
    rows = read_scores(args.scores)
    if not rows:
        raise DataError(f"{args.scores}: no rows")
    _evaluate(rows, out, {"scores": str(args.scores)}, args.bins)
    record_config(out, args)


def cmd_report(args):
    out = out_dir(args)
    m = load_manifest(args.data)
    ck = Checkpoint.load(args.checkpoint, expected_shape=m.shape)
    picked = m.subset(m.records[: args.n])
    samples = [picked.load_sample(r) for r in picked.records]
    written = reconstruction_report(ck, samples, out / "reconstructions", args.bins)
    record_config(out, args, config_hash=ck.config_hash)
    print(f"wrote {len(written)} files to {out / 'reconstructions'}")


def resize_planes(data: np.ndarray, P: int) -> np.ndarray:
    """Tail-truncate or zero-pad the packet axis, as ingest does for short flows."""
    n, p0, H, W = data.shape
    if P <= p0:
        return data[:, :P].copy()
    return np.concatenate([data, np.zeros((n, P - p0, H, W), data.dtype)], axis=1)


def _sweep_one(job):
    param, value, cfg_dict, ae_kw, ablation, train_data, test_data, labels, ids, out = job
    from .ingest import TrafficSample
    row = {"param": param, "value": value, "auc": "", "acc": "", "f1": "", "epochs": "", "status": "ok", "error": ""}
    try:
        cfg = TrainConfig.from_dict({**cfg_dict, param: value})
        if param == "P":
            train_data, test_data = resize_planes(train_data, int(value)), resize_planes(test_data, int(value))
        ae_cfg = AEConfig(**{**ae_kw, "in_planes": cfg.P})
        ck = train(train_data, cfg, Ablation.parse(ablation), ae_cfg)
        sub = Path(out)
        sub.mkdir(parents=True, exist_ok=True)
        ck.save(sub / f"model_{ck.ablation.tag}.pt")
        samples = [TrafficSample(x, l, i) for x, l, i in zip(test_data, labels, ids)]
        rep = evaluate(score_dataset(ck, samples), {"param": param, "value": value})
        write_scores(sub / "scores.csv", rep.rows)
        write_summary(sub / "summary.json", rep)
        m = rep.metrics["fused"]
        row.update(auc=m["auc"], acc=m["acc"], f1=m["f1"], epochs=ck.state.epoch)
    except (FreqADError, ValueError) as e:
        row.update(status="failed", error=f"{type(e).__name__}: {e}")
    return row


def cmd_sweep(args):
    out = out_dir(args)
    if len(args.values) < 2:
        raise UsageError("sweep needs at least two values")
    m = load_manifest(args.data)
    cfg = resolve_train_config(args, m.P)
    if args.train_size is None:
        raise UsageError("sweep needs --train-size to hold out a test split")
    train_m, test_m = build_split(m, args.train_size, cfg.seed)
    train_data = train_m.load_arrays()[0]
    test_data, labels, ids = test_m.load_arrays()
    ae_kw = resolve_ae_config(args, m.P).to_dict()
    cast = int if args.param == "P" else float
    jobs = [(args.param, cast(v), cfg.to_dict(), ae_kw, args.ablation, train_data, test_data,
             labels, ids, str(out / f"{args.param}={v}")) for v in args.values]
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    path = out / f"sweep_{args.param}.csv"
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    ok = [r for r in rows if r["status"] == "ok"]
    try_plot(lambda ax: (ax.plot([r["value"] for r in ok], [r["auc"] for r in ok], marker="o"),
                         ax.set_xlabel(args.param), ax.set_ylabel("fused AUC")), out / f"sweep_{args.param}.png")
    record_config(out, args, train_config=cfg.to_dict(), ae_config=ae_kw)
    for r in rows:
        auc = f"{r['auc']:.4f}" if r["status"] == "ok" else "-"
        print(f"{args.param}={r['value']} auc={auc} {r['status']} {r['error']}".rstrip())
    failed = len(rows) - len(ok)
    if failed:
        print(f"{failed} of {len(rows)} sweep values failed", file=sys.stderr)
    return EXIT_OK if ok else EXIT_DATA


# --- parser --------------------------------------------------------------------


def add_train_flags(p):
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig fields; flags override it")
    for f in fields(TrainConfig):
        if f.name == "seed":
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=type(f.default), default=None)
    p.add_argument("--ablation", action="append", default=[],
                   help="no_low_branch, no_high_branch, no_decouple, no_freq_loss, static_fusion=product|weighted_sum")
    p.add_argument("--train-size", type=int, default=None, help="normal samples drawn for training; rest is test")
    p.add_argument("--widths", type=int, nargs="+", default=None, help="encoder channel widths")
    p.add_argument("--latent", type=int, default=None)
    p.add_argument("--no-attention", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = Parser(prog="freqad", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=Parser)

    def cmd(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--out", default=".", help=f"output directory (relative paths go under ${OUT_ROOT_ENV})")
        return p

    p = cmd("synth", cmd_synth, "write a seeded synthetic corpus")
    p.add_argument("--normal", type=int, required=True)
    p.add_argument("--anomalous", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--anomaly", choices=("high", "low", "both"), default="high")
    p.add_argument("--strength", type=float, default=SynthSpec.anomaly_strength)
    for k, v in (("P", 8), ("H", 32), ("W", 32)):
        p.add_argument(f"--{k}", type=int, default=v)

    p = cmd("ingest", cmd_ingest, "convert raw flows into traffic images")
    p.add_argument("--hex", type=Path, action="append", help="file of flow_id,label,hex packets rows")
    p.add_argument("--flow-dir", type=Path, action="append", help="directory holding one file per packet")
    p.add_argument("--label", choices=("normal", "anomalous", "unknown"), default="unknown",
                   help="label for --flow-dir flows")
    for k, v in (("P", 8), ("H", 32), ("W", 32)):
        p.add_argument(f"--{k}", type=int, default=v)

    p = cmd("spectrum", cmd_spectrum, "radial power profiles per label")
    p.add_argument("--data", required=True)
    p.add_argument("--bins", type=int, default=16)

    p = cmd("train", cmd_train, "train a detector on normal samples")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", type=Path, default=None)
    p.add_argument("--stop-after", type=int, default=None, help="pause after this many total epochs")
    add_train_flags(p)

    p = cmd("score", cmd_score, "score samples with a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True)
    p.add_argument("--eval", action="store_true", help="also evaluate the scores")

    p = cmd("eval", cmd_eval, "metrics and score densities from a scores table")
    p.add_argument("--scores", required=True, type=Path)
    p.add_argument("--bins", type=int, default=30)

    p = cmd("report", cmd_report, "reconstruction images and radial profiles")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True)
    p.add_argument("-n", type=int, default=8, help="number of samples (at most 64)")
    p.add_argument("--bins", type=int, default=16)

    p = cmd("sweep", cmd_sweep, "train and evaluate once per value of P or D")
    p.add_argument("--param", choices=("P", "D"), required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--parallel", type=int, default=1, help="worker processes (each value runs independently)")
    add_train_flags(p)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if getattr(args, "values", None) is not None:
            cast = int if args.param == "P" else float
            try:
                [cast(v) for v in args.values]
            except ValueError:
                raise UsageError(f"bad --values for {args.param}: {args.values}")
        rc = args.func(args)
        return EXIT_OK if rc is None else rc
    except UsageError as e:
        print(f"freqad {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"freqad {args.command}: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, OSError) as e:
        print(f"freqad {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"freqad {args.command}: invalid setting: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
