import numpy as np
import pytest

from freqad.errors import DataError, InsufficientNormalsError
from freqad.ingest import (
    DatasetManifest, RawFlow, TrafficSample, build_split, flow_to_sample, packet_to_image,
    read_flow_dir, read_hex_flows, read_sample, write_dataset, write_sample,
)
from freqad.spectral import power_spectrum_profile
from freqad.synth import SynthSpec, synth_corpus, synth_samples


def test_packet_all_255_is_ones():
    img = packet_to_image(b"\xff" * 1024, 32, 32)
    assert img.shape == (32, 32)
    assert np.all(img == 1.0)


def test_empty_packet_is_zero():
    assert np.all(packet_to_image(b"", 32, 32) == 0.0)


def test_long_packet_truncated():
    base = bytes(range(256)) * 4
    assert np.array_equal(packet_to_image(base + b"\x01" * 6), packet_to_image(base + b"\xfe" * 6))


def test_packet_row_major_layout():
    img = packet_to_image(bytes([0, 51, 102, 255, 10]), 2, 3)
    assert img[0, 1] == pytest.approx(51 / 255)
    assert img[1, 0] == pytest.approx(1.0)
    assert img[1, 1] == pytest.approx(10 / 255)
    assert img[1, 2] == 0.0


def test_flow_padding_and_truncation():
    pkts = [bytes([i + 1]) * 100 for i in range(10)]
    s = flow_to_sample(RawFlow("f", pkts[:3], "normal"), P=8)
    assert s.data.shape == (8, 32, 32)
    assert all(s.data[i].max() > 0 for i in range(3))
    assert np.all(s.data[3:] == 0)
    assert s.label == "normal" and s.source_id == "f"

    s10 = flow_to_sample(RawFlow("g", pkts, "anomalous"), P=8)
    assert [round(s10.data[i, 0, 0] * 255) for i in range(8)] == list(range(1, 9))
    assert np.all(flow_to_sample(RawFlow("e", [])).data == 0)


def test_sample_invariants_enforced():
    with pytest.raises(DataError):
        TrafficSample(np.full((8, 4, 4), 1.5))
    with pytest.raises(DataError):
        TrafficSample(np.zeros((4, 4)))
    with pytest.raises(DataError):
        TrafficSample(np.zeros((1, 4, 4)), label="weird")


def test_sample_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = TrafficSample(rng.random((8, 32, 32)).astype(np.float32))
    write_sample(tmp_path / "a.bin", s)
    assert (tmp_path / "a.bin").stat().st_size == 8 * 32 * 32 * 4
    back = read_sample(tmp_path / "a.bin", (8, 32, 32))
    assert np.array_equal(back, s.data)
    with pytest.raises(DataError):
        read_sample(tmp_path / "a.bin", (8, 32, 16))


def _manifest(tmp_path, n_norm=20, n_anom=10):
    samples = [TrafficSample(np.full((2, 4, 4), i / 100, np.float32), "normal", f"n{i}") for i in range(n_norm)]
    samples += [TrafficSample(np.full((2, 4, 4), 0.9, np.float32), "anomalous", f"a{i}") for i in range(n_anom)]
    return write_dataset(samples, tmp_path / "ds")


def test_manifest_round_trip(tmp_path):
    m = _manifest(tmp_path)
    m2 = DatasetManifest.load(tmp_path / "ds")
    assert m2.shape == (2, 4, 4)
    assert m2.records == m.records
    assert m2.counts() == {"normal": 20, "anomalous": 10, "unknown": 0}
    m2.validate()
    (tmp_path / "ds" / m2.records[0].path).unlink()
    with pytest.raises(DataError):
        m2.validate()


def test_split_counts(tmp_path):
    m = _manifest(tmp_path)
    train, test = build_split(m, 10, seed=3)
    assert len(train) == 10 and all(r.label == "normal" for r in train.records)
    assert test.counts()["normal"] == 10 and test.counts()["anomalous"] == 10
    assert sorted(train.records + test.records, key=lambda r: r.path) == sorted(m.records, key=lambda r: r.path)


def test_split_edge_cases(tmp_path):
    m = _manifest(tmp_path)
    train, test = build_split(m, 0, seed=1)
    assert len(train) == 0 and test.records == m.records
    assert build_split(m, 10, 5)[0].records == build_split(m, 10, 5)[0].records
    with pytest.raises(InsufficientNormalsError):
        build_split(m, 21, 0)


def test_flow_readers(tmp_path):
    d = tmp_path / "flow1"
    d.mkdir()
    (d / "002.bin").write_bytes(b"\x02" * 5)
    (d / "001.bin").write_bytes(b"\x01" * 5)
    flow = read_flow_dir(d, "normal")
    assert flow.packets == [b"\x01" * 5, b"\x02" * 5]

    f = tmp_path / "flows.csv"
    f.write_text("# id,label,packets\nx,normal,ff00 01\ny,anomalous,\nx,normal,02\n")
    flows = {fl.flow_id: fl for fl in read_hex_flows(f)}
    assert flows["x"].packets == [b"\xff\x00", b"\x01", b"\x02"]
    assert flows["y"].packets == [] and flows["y"].label == "anomalous"


def test_synth_corpus_basic(tmp_path):
    m = synth_corpus(5, 0, seed=1, out_dir=tmp_path / "a")
    assert m.counts() == {"normal": 5, "anomalous": 0, "unknown": 0}
    m2 = synth_corpus(5, 0, seed=1, out_dir=tmp_path / "b")
    for r1, r2 in zip(m.records, m2.records):
        assert (m.root / r1.path).read_bytes() == (m2.root / r2.path).read_bytes()


def test_synth_full_frequency_profile():
    data = np.stack([s.data for s in synth_samples(100, 0, seed=0)])
    _, prof = power_spectrum_profile(data, 16)
    floor = np.log10(1e-12)
    # high-frequency bins stay far above the numerical floor, and the texture band
    # (7-14 cycles, bins 5-8) carries at least as much power as the band below it
    assert np.all(prof[8:] > floor + 10)
    assert prof[5:9].min() > prof[2:5].max()


def test_synth_anomaly_modes_differ():
    spec = SynthSpec(anomaly="low")
    a = synth_samples(0, 3, seed=2, spec=spec)
    assert all(s.label == "anomalous" for s in a)
    with pytest.raises(ValueError):
        synth_samples(1, 1, seed=0, spec=SynthSpec(anomaly="nope"))
