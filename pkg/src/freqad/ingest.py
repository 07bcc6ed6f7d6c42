"""Flow-to-image conversion, on-disk sample store and zero-positive splits."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, InsufficientNormalsError

LABELS = ("normal", "anomalous", "unknown")
SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


def _check_label(label: str) -> str:
    if label not in LABELS:
        raise DataError(f"label {label!r} not in {LABELS}")
    return label


@dataclass
class RawFlow:
    flow_id: str
    packets: list[bytes] = field(default_factory=list)
    label: str = "unknown"

    def __post_init__(self):
        _check_label(self.label)
        self.packets = [bytes(p) for p in self.packets]


@dataclass
class TrafficSample:
    data: np.ndarray
    label: str = "unknown"
    source_id: str = ""

    def __post_init__(self):
        _check_label(self.label)
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise DataError(f"sample must be P x H x W, got shape {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise DataError(f"sample {self.source_id!r} has values outside [0, 1]")
        self.data = data

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def packet_to_image(packet_bytes: bytes, H: int = 32, W: int = 32) -> np.ndarray:
    """First H*W bytes, row-major, scaled by 1/255; short packets are zero-padded."""
    if H < 1 or W < 1:
        raise ValueError("H and W must be >= 1")
    n = H * W
    buf = np.frombuffer(bytes(packet_bytes[:n]), dtype=np.uint8)
    img = np.zeros(n, dtype=np.float32)
    img[: buf.size] = buf / np.float32(255.0)
    return img.reshape(H, W)


def flow_to_sample(flow: RawFlow, P: int = 8, H: int = 32, W: int = 32) -> TrafficSample:
    if P < 1:
        raise ValueError("P must be >= 1")
    data = np.zeros((P, H, W), dtype=np.float32)
    for i, pkt in enumerate(flow.packets[:P]):
        data[i] = packet_to_image(pkt, H, W)
    return TrafficSample(data, flow.label, flow.flow_id)


# --- on-disk format -------------------------------------------------------------
# One headerless little-endian float32 blob per sample; shape lives in the manifest.


def write_sample(path: str | os.PathLike, sample: TrafficSample) -> None:
    np.ascontiguousarray(sample.data, dtype="<f4").tofile(path)


def read_sample(path: str | os.PathLike, shape: Sequence[int]) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise DataError(f"{path}: {raw.size} floats, expected shape {tuple(shape)}")
    return raw.reshape(shape).astype(np.float32)


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: str
    source_id: str


@dataclass
class DatasetManifest:
    """Index of sample files. Record paths are relative to ``root``."""

    P: int
    H: int
    W: int
    records: list[ManifestRecord] = field(default_factory=list)
    root: Path = field(default_factory=Path)
    schema_version: int = SCHEMA_VERSION

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.P, self.H, self.W)

    def counts(self) -> dict[str, int]:
        out = {k: 0 for k in LABELS}
        for r in self.records:
            out[r.label] += 1
        return out

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, records: Iterable[ManifestRecord]) -> "DatasetManifest":
        return DatasetManifest(self.P, self.H, self.W, list(records), self.root, self.schema_version)

    def load_sample(self, rec: ManifestRecord) -> TrafficSample:
        return TrafficSample(read_sample(self.root / rec.path, self.shape), rec.label, rec.source_id)

    def load_arrays(self) -> tuple[np.ndarray, list[str], list[str]]:
        """Stack every sample into one (N, P, H, W) float32 array."""
        data = np.empty((len(self.records), *self.shape), dtype=np.float32)
        for i, rec in enumerate(self.records):
            data[i] = self.load_sample(rec).data
        return data, [r.label for r in self.records], [r.source_id for r in self.records]

    def validate(self) -> None:
        for rec in self.records:
            _check_label(rec.label)
            p = self.root / rec.path
            if not p.is_file():
                raise DataError(f"missing sample file {p}")
            self.load_sample(rec)

    def to_dict(self) -> dict:
        return {
            "header": {"P": self.P, "H": self.H, "W": self.W, "schema_version": self.schema_version},
            "counts": self.counts(),
            "records": [{"path": r.path, "label": r.label, "source_id": r.source_id} for r in self.records],
        }

    def save(self, path: str | os.PathLike | None = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            doc = json.loads(path.read_text())
            hdr = doc["header"]
            if hdr.get("schema_version") != SCHEMA_VERSION:
                raise DataError(f"unsupported manifest schema {hdr.get('schema_version')}")
            recs = [ManifestRecord(r["path"], _check_label(r["label"]), r["source_id"]) for r in doc["records"]]
        except (OSError, KeyError, TypeError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read manifest {path}: {e}") from e
        return cls(int(hdr["P"]), int(hdr["H"]), int(hdr["W"]), recs, path.parent, SCHEMA_VERSION)


def write_dataset(samples: Iterable[TrafficSample], out_dir: str | os.PathLike) -> DatasetManifest:
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    manifest = None
    for i, s in enumerate(samples):
        if manifest is None:
            manifest = DatasetManifest(*s.shape, root=out)
        elif s.shape != manifest.shape:
            raise DataError(f"sample {s.source_id!r} has shape {s.shape}, expected {manifest.shape}")
        rel = f"samples/{i:06d}.bin"
        write_sample(out / rel, s)
        manifest.records.append(ManifestRecord(rel, s.label, s.source_id or f"s{i:06d}"))
    if manifest is None:
        raise DataError("no samples to write")
    manifest.save()
    return manifest


def build_split(manifest: DatasetManifest, train_size: int, seed: int = 0):
    """Draw ``train_size`` normal records for training; everything else is test."""
    normal_idx = [i for i, r in enumerate(manifest.records) if r.label == "normal"]
    if train_size < 0 or len(normal_idx) < train_size:
        raise InsufficientNormalsError(
            f"need {train_size} normal samples for training, manifest has {len(normal_idx)}")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(normal_idx, size=train_size, replace=False).tolist())
    train = [manifest.records[i] for i in sorted(chosen)]
    test = [r for i, r in enumerate(manifest.records) if i not in chosen]
    return manifest.subset(train), manifest.subset(test)


# --- raw flow readers --------------------------------------------------------------


def read_flow_dir(flow_dir: str | os.PathLike, label: str = "unknown") -> RawFlow:
    """One file per packet; arrival order = lexicographic filename order."""
    d = Path(flow_dir)
    files = sorted(p for p in d.iterdir() if p.is_file())
    return RawFlow(d.name, [p.read_bytes() for p in files], label)


def read_hex_flows(path: str | os.PathLike, delimiter: str = ",") -> list[RawFlow]:
    """Rows of ``flow_id<d>label<d>hexpkt1 hexpkt2 ...``; blank lines and '#' comments skipped."""
    flows: dict[str, RawFlow] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(delimiter)
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        fid, label, hexpkts = (p.strip() for p in parts)
        try:
            pkts = [bytes.fromhex(h) for h in hexpkts.split()]
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: bad hex payload") from e
        if fid in flows:
            flows[fid].packets.extend(pkts)
        else:
            flows[fid] = RawFlow(fid, pkts, _check_label(label))
    return list(flows.values())
