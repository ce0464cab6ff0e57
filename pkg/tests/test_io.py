import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cardio_anomaly.benchmark import CLASS_NAMES, long_tail_benchmark, make_record
from cardio_anomaly.errors import (ConfigError, ContractError, CorruptRecordError, DataError, SchemaError,
                                   UnsupportedFormatError)
from cardio_anomaly.io import (DatasetSplit, LabelSchema, class_counts, decode_format16, encode_labels,
                               fit_normalization, random_split, read_record, read_wfdb16, records_checksum,
                               tier_classes, write_record, write_wfdb16)
from cardio_anomaly.signal import AttributeVector, EcgRecord


def two_complement_oracle(raw: bytes, n_sig: int) -> np.ndarray:
    vals = []
    for i in range(0, len(raw), 2):
        v = raw[i] | (raw[i + 1] << 8)
        vals.append(v - 65536 if v & 0x8000 else v)
    return np.array(vals, dtype=np.int64).reshape(-1, n_sig).T


def test_hand_decoded_example(tmp_path):
    (tmp_path / "r.hea").write_text("r 1 500 1\nr.dat 16 1000(0)/mV 16 0 0 0 0 I\n")
    (tmp_path / "r.dat").write_bytes(bytes([0xE8, 0x03]))
    rec = read_wfdb16(tmp_path / "r.hea")
    assert rec.fs == 500 and rec.channels.shape == (1, 1)
    assert rec.channels[0, 0] == 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.integers(0, 50), st.integers(0, 2**31))
def test_decode_matches_byte_oracle(n_sig, n, seed):
    raw = np.random.default_rng(seed).integers(0, 256, 2 * n_sig * n, dtype=np.uint8).tobytes()
    np.testing.assert_array_equal(decode_format16(raw, n_sig), two_complement_oracle(raw, n_sig))


def test_baseline_and_gain(tmp_path):
    (tmp_path / "r.hea").write_text("r 2 250 2\nr.dat 16 200(-100)/mV 16 0 0 0 0 I\nr.dat 16 400/mV\n")
    (tmp_path / "r.dat").write_bytes(np.array([[100, 400], [-100, 0]], dtype="<i2").tobytes())
    rec = read_wfdb16(tmp_path / "r.hea")
    np.testing.assert_allclose(rec.channels, [[1.0, 0.0], [1.0, 0.0]])


def test_wfdb_errors(tmp_path):
    (tmp_path / "a.hea").write_text("a 1 500 1\na.dat 212 200\n")
    with pytest.raises(UnsupportedFormatError):
        read_wfdb16(tmp_path / "a.hea")
    (tmp_path / "b.hea").write_text("b 1 500 4\nb.dat 16 200\n")
    (tmp_path / "b.dat").write_bytes(b"\x00\x00\x01\x00")
    with pytest.raises(CorruptRecordError):
        read_wfdb16(tmp_path / "b.hea")
    with pytest.raises(DataError):
        read_wfdb16(tmp_path / "missing.hea")


def test_wfdb_round_trip(tmp_path):
    rec = make_record(3)
    adc = np.round(rec.channels * 1000).astype(np.int16)
    hea = write_wfdb16("x", adc, rec.fs, tmp_path, gain=1000.0)
    back = read_wfdb16(hea)
    np.testing.assert_array_equal(np.round(back.channels * 1000).astype(np.int16), adc)


def test_native_round_trip(tmp_path):
    rec = make_record(5, kinds=("st_shift",))
    back = read_record(write_record(rec, tmp_path))
    assert back.record_id == rec.record_id and back.labels == rec.labels and back.fs == rec.fs
    np.testing.assert_array_equal(back.channels, rec.channels.astype(np.float32))
    np.testing.assert_array_equal(back.anomaly_mask, rec.anomaly_mask)
    np.testing.assert_array_equal(back.r_peaks, rec.r_peaks)
    assert back.attributes == rec.attributes


def test_native_corruption(tmp_path):
    hdr = write_record(make_record(1), tmp_path)
    data = tmp_path / f"{make_record(1).record_id}.f32"
    data.write_bytes(data.read_bytes()[:-4])
    with pytest.raises(CorruptRecordError):
        read_record(hdr)
    (tmp_path / "bad.hdr").write_text("nonsense\n")
    with pytest.raises(CorruptRecordError):
        read_record(tmp_path / "bad.hdr")
    with pytest.raises(ContractError):
        write_record(EcgRecord("a b", np.zeros(5), 500.0), tmp_path)


def test_labels():
    schema = LabelSchema(("a", "b", "c"))
    assert encode_labels([], schema).tolist() == [0, 0, 0]
    assert encode_labels(["c", "a", "b"], schema).tolist() == [1, 1, 1]
    assert encode_labels(["b", "a"], schema).tolist() == encode_labels(["a", "b"], schema).tolist()
    with pytest.raises(SchemaError):
        encode_labels(["d"], schema)
    with pytest.raises(SchemaError):
        LabelSchema(("a", "a"))


def test_schema_file_round_trip(tmp_path):
    schema = LabelSchema(CLASS_NAMES)
    schema.save(tmp_path / "s.txt")
    loaded = LabelSchema.load(tmp_path / "s.txt")
    assert loaded == schema and loaded.checksum() == schema.checksum()


def attrs(rng, n):
    return [AttributeVector(sex=float(rng.integers(0, 2)), age=float(rng.uniform(20, 80)),
                            heart_rate=float(rng.uniform(50, 100)), pr_ms=float(rng.uniform(120, 200)),
                            qt_ms=float(rng.uniform(350, 450)), qtc_ms=float(rng.uniform(380, 460)),
                            qrs_ms=float(rng.uniform(70, 110))) for _ in range(n)]


def test_normalization():
    rng = np.random.default_rng(0)
    train = attrs(rng, 30)
    stats = fit_normalization(train)
    mean_age = np.mean([a.age for a in train])
    t, present = stats.apply(AttributeVector(age=mean_age))
    assert t[1] == pytest.approx(0.0, abs=1e-12) and present.tolist() == [0, 1, 0, 0, 0, 0, 0]
    for a in train[:5]:
        np.testing.assert_allclose(stats.invert(stats.apply(a)[0]), a.as_array(), atol=1e-12)
    assert stats.center[0] == 0 and stats.scale[0] == 1  # sex passes through


def test_normalization_uses_train_only():
    rng = np.random.default_rng(1)
    train, val = attrs(rng, 20), attrs(rng, 10)
    a = fit_normalization(train)
    # "mutating val" means the fitted stats never see it
    val[0] = AttributeVector(age=1e6)
    b = fit_normalization(train)
    np.testing.assert_array_equal(a.center, b.center)
    np.testing.assert_array_equal(a.scale, b.scale)


def test_normalization_errors():
    same = [AttributeVector(sex=0.0, age=50.0, heart_rate=60.0, pr_ms=150.0, qt_ms=400.0, qtc_ms=400.0,
                            qrs_ms=90.0)] * 3
    with pytest.raises(DataError):
        fit_normalization(same)
    with pytest.raises(ContractError):
        fit_normalization(same[:1])
    with pytest.raises(ConfigError):
        fit_normalization(same, method="minmax")
    ref = fit_normalization(same, method="reference")
    assert ref.apply(same[0])[0][1] == pytest.approx(0.5)


def test_split():
    ids = [f"r{i}" for i in range(50)]
    s = random_split(ids, seed=3)
    assert len(s.train) + len(s.val) + len(s.test) == 50
    assert s == random_split(list(reversed(ids)), seed=3)
    with pytest.raises(DataError):
        DatasetSplit(("a",), ("a",), ())


def test_split_file_round_trip(tmp_path):
    s = random_split([f"r{i}" for i in range(20)], seed=1)
    s.save(tmp_path / "split.txt")
    assert DatasetSplit.load(tmp_path / "split.txt").checksum() == s.checksum()


def test_tiers():
    tiers = tier_classes({"a": 0, "b": 10, "c": 50, "d": 51, "e": 9})
    assert tiers == {"a": "rare", "b": "uncommon", "c": "uncommon", "d": "common", "e": "rare"}
    with pytest.raises(ConfigError):
        tier_classes({"a": 1}, thresholds=(50, 10))


def test_tiers_partition_benchmark():
    train = long_tail_benchmark(seed=0, n_train=120, n_test_per_class=2)["train"]
    schema = LabelSchema(CLASS_NAMES)
    tiers = tier_classes(class_counts(train, schema))
    assert set(tiers) == set(CLASS_NAMES)
    assert set(tiers.values()) == {"common", "uncommon", "rare"}
    assert tiers == tier_classes(class_counts(train, schema))


def test_records_checksum_order_sensitive():
    a, b = make_record(1), make_record(2)
    assert records_checksum([a, b]) != records_checksum([b, a])
    assert records_checksum([a, b]) == records_checksum([make_record(1), make_record(2)])
