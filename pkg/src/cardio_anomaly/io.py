"""Record storage, WFDB format-16 reading, label schemas, splits and attribute normalization.

Native record layout (two files per record, ``<id>.hdr`` and ``<id>.f32``)::

    cardio-record 1
    record_id <id>
    fs <float>
    channels <int>
    length <int>
    attr.<name> <float>          one line per present attribute
    labels <name>,<name>,...     may be empty
    mask <start>-<stop>,...      half-open sample spans, optional
    r_peaks <i>,<j>,...          optional
    data <id>.f32

``<id>.f32`` holds ``channels * length`` little-endian float32 values,
channel-major (all samples of channel 0, then channel 1, ...).

WFDB support covers single-segment records whose signals all use format 16:
little-endian two's-complement int16 samples, interleaved by signal within
each data file, with physical value ``(adc - baseline) / gain``.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, CorruptRecordError, DataError, SchemaError, UnsupportedFormatError
from .signal import ATTRIBUTE_NAMES, AttributeVector, EcgRecord

MAGIC = "cardio-record 1"


# -- native records -------------------------------------------------------------------

def _spans(mask: np.ndarray) -> list[tuple[int, int]]:
    m = np.asarray(mask).astype(np.int8)
    edges = np.flatnonzero(np.diff(np.concatenate(([0], m, [0]))))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


def write_record(record: EcgRecord, directory) -> Path:
    """Write header + payload; returns the header path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rid = record.record_id
    if not rid or "/" in rid or rid.strip() != rid or " " in rid:
        raise ContractError(f"record id {rid!r} is not a plain file name")
    data_name = f"{rid}.f32"
    lines = [
        MAGIC,
        f"record_id {rid}",
        f"fs {record.fs!r}",
        f"channels {record.n_channels}",
        f"length {record.n_samples}",
    ]
    for name, v in record.attributes.to_mapping().items():
        if v is not None:
            lines.append(f"attr.{name} {float(v)!r}")
    lines.append("labels " + ",".join(record.labels))
    if record.anomaly_mask is not None:
        lines.append("mask " + ",".join(f"{a}-{b}" for a, b in _spans(record.anomaly_mask)))
    if record.r_peaks is not None:
        lines.append("r_peaks " + ",".join(str(int(p)) for p in record.r_peaks))
    lines.append(f"data {data_name}")
    (directory / data_name).write_bytes(np.ascontiguousarray(record.channels, dtype="<f4").tobytes())
    hdr = directory / f"{rid}.hdr"
    hdr.write_text("\n".join(lines) + "\n")
    return hdr


def _parse_header(path: Path) -> dict[str, str]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: cannot read header ({exc.strerror})") from None
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise CorruptRecordError(f"{path}: not a record header (expected {MAGIC!r})")
    out: dict[str, str] = {}
    for ln in lines[1:]:
        if not ln.strip():
            continue
        key, _, value = ln.partition(" ")
        out[key] = value.strip()
    return out


def read_record(header_path) -> EcgRecord:
    path = Path(header_path)
    h = _parse_header(path)
    try:
        rid, fs = h["record_id"], float(h["fs"])
        n_ch, n = int(h["channels"]), int(h["length"])
        data_path = path.parent / h["data"]
    except (KeyError, ValueError) as exc:
        raise CorruptRecordError(f"{path}: bad or missing header field {exc}") from None
    try:
        raw = data_path.read_bytes()
    except OSError:
        raise CorruptRecordError(f"{path}: data file {data_path.name} missing") from None
    if len(raw) != 4 * n_ch * n:
        raise CorruptRecordError(f"{data_path}: {len(raw)} bytes, expected {4 * n_ch * n}")
    channels = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n_ch, n)
    attrs = AttributeVector.from_mapping({k[5:]: float(v) for k, v in h.items() if k.startswith("attr.")})
    labels = tuple(x for x in h.get("labels", "").split(",") if x)
    mask = None
    if "mask" in h:
        mask = np.zeros(n, dtype=np.uint8)
        for span in filter(None, h["mask"].split(",")):
            a, _, b = span.partition("-")
            mask[int(a) : int(b)] = 1
    peaks = None
    if "r_peaks" in h:
        peaks = np.array([int(p) for p in h["r_peaks"].split(",") if p], dtype=np.int64)
    return EcgRecord(rid, channels, fs, attrs, labels, mask, peaks)


def list_records(directory) -> list[Path]:
    """Header paths in ``directory``, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    return sorted(directory.glob("*.hdr"))


def read_records(directory) -> list[EcgRecord]:
    return [read_record(p) for p in list_records(directory)]


def write_records(records: Iterable[EcgRecord], directory) -> list[Path]:
    return [write_record(r, directory) for r in records]


# -- WFDB format 16 ---------------------------------------------------------------------

_GAIN_RE = re.compile(r"^([-+0-9.eE]+)(?:\(([-+0-9]+)\))?(?:/(\S+))?$")


@dataclass(frozen=True)
class WfdbSignal:
    file_name: str
    fmt: str
    gain: float
    baseline: int
    units: str = "mV"
    description: str = ""


def parse_wfdb_header(text: str) -> tuple[str, int, float, int, list[WfdbSignal]]:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise CorruptRecordError("empty WFDB header")
    rec = lines[0].split()
    if len(rec) < 2:
        raise CorruptRecordError(f"bad WFDB record line {lines[0]!r}")
    name = rec[0]
    if "/" in name:
        raise UnsupportedFormatError("multi-segment WFDB records are not supported")
    try:
        n_sig = int(rec[1])
        fs = float(rec[2].split("/")[0]) if len(rec) > 2 else 250.0
        n_samples = int(rec[3]) if len(rec) > 3 else -1
    except ValueError:
        raise CorruptRecordError(f"bad WFDB record line {lines[0]!r}") from None
    if len(lines) - 1 < n_sig:
        raise CorruptRecordError(f"header declares {n_sig} signals but lists {len(lines) - 1}")
    sigs = []
    for ln in lines[1 : 1 + n_sig]:
        parts = ln.split()
        if len(parts) < 2:
            raise CorruptRecordError(f"bad WFDB signal line {ln!r}")
        fmt = parts[1]
        if fmt != "16":
            raise UnsupportedFormatError(f"WFDB format {fmt!r} not supported (only 16)")
        gain, baseline, units = 200.0, None, "mV"
        if len(parts) > 2:
            m = _GAIN_RE.match(parts[2])
            if not m:
                raise CorruptRecordError(f"bad gain field {parts[2]!r}")
            gain = float(m.group(1)) or 200.0
            baseline = int(m.group(2)) if m.group(2) is not None else None
            units = m.group(3) or "mV"
        adc_zero = int(parts[4]) if len(parts) > 4 else 0
        desc = " ".join(parts[8:]) if len(parts) > 8 else ""
        sigs.append(WfdbSignal(parts[0], fmt, gain, adc_zero if baseline is None else baseline, units, desc))
    return name, n_sig, fs, n_samples, sigs


def decode_format16(raw: bytes, n_sig: int) -> np.ndarray:
    """Raw bytes -> (n_sig, n_samples) int16 adc values."""
    if len(raw) % (2 * n_sig):
        raise CorruptRecordError(f"{len(raw)} bytes is not a whole number of {n_sig}-signal frames")
    return np.frombuffer(raw, dtype="<i2").reshape(-1, n_sig).T.copy()


def read_wfdb16(header_path) -> EcgRecord:
    path = Path(header_path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: cannot read header ({exc.strerror})") from None
    name, n_sig, fs, n_samples, sigs = parse_wfdb_header(text)
    # signals sharing a data file are interleaved in header order
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(sigs):
        groups.setdefault(s.file_name, []).append(i)
    adc: list[np.ndarray | None] = [None] * n_sig
    for fname, idx in groups.items():
        try:
            raw = (path.parent / fname).read_bytes()
        except OSError:
            raise CorruptRecordError(f"{path}: data file {fname} missing") from None
        expected = 2 * len(idx) * n_samples if n_samples >= 0 else len(raw)
        if len(raw) != expected:
            raise CorruptRecordError(f"{fname}: {len(raw)} bytes, expected {expected}")
        block = decode_format16(raw, len(idx))
        for row, i in enumerate(idx):
            adc[i] = block[row]
    lengths = {a.size for a in adc}
    if len(lengths) != 1:
        raise CorruptRecordError(f"{path}: signals have different lengths {sorted(lengths)}")
    channels = np.stack([(a.astype(np.float64) - s.baseline) / s.gain for a, s in zip(adc, sigs)])
    return EcgRecord(name, channels, fs)


def write_wfdb16(record_name: str, adc: np.ndarray, fs: float, directory, gain: float = 1000.0,
                 baseline: int = 0) -> Path:
    """Write int16 adc samples (n_sig, n) as one interleaved format-16 file."""
    adc = np.atleast_2d(np.asarray(adc))
    if adc.dtype.kind not in "iu" or adc.min(initial=0) < -32768 or adc.max(initial=0) > 32767:
        raise ContractError("adc values must be integers in the int16 range")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n_sig, n = adc.shape
    dat = f"{record_name}.dat"
    (directory / dat).write_bytes(np.ascontiguousarray(adc.T, dtype="<i2").tobytes())
    lines = [f"{record_name} {n_sig} {fs:g} {n}"]
    for i in range(n_sig):
        lines.append(f"{dat} 16 {gain:g}({baseline})/mV 16 0 {int(adc[i, 0]) if n else 0} 0 0 sig{i}")
    hea = directory / f"{record_name}.hea"
    hea.write_text("\n".join(lines) + "\n")
    return hea


# -- labels -------------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelSchema:
    class_names: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(self.class_names)
        if not names:
            raise SchemaError("label schema needs at least one class")
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate class names in {names}")
        object.__setattr__(self, "class_names", names)
        object.__setattr__(self, "index", {n: i for i, n in enumerate(names)})

    def __len__(self) -> int:
        return len(self.class_names)

    def checksum(self) -> str:
        return hashlib.sha256("\n".join(self.class_names).encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.class_names) + "\n")

    @classmethod
    def load(cls, path) -> "LabelSchema":
        return cls(tuple(ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()))


def encode_labels(names: Iterable[str], schema: LabelSchema) -> np.ndarray:
    out = np.zeros(len(schema))
    for n in names:
        if n not in schema.index:
            raise SchemaError(f"label {n!r} not in schema {schema.class_names}")
        out[schema.index[n]] = 1.0
    return out


def label_matrix(records: Sequence, schema: LabelSchema) -> np.ndarray:
    return np.stack([encode_labels(r.labels, schema) for r in records]) if records else np.zeros((0, len(schema)))


# -- attribute normalization ----------------------------------------------------------

# reference ranges used by the min-max alternative
REFERENCE_RANGES = {
    "age": (0.0, 100.0),
    "heart_rate": (60.0, 100.0),
    "pr_ms": (120.0, 200.0),
    "qt_ms": (320.0, 440.0),
    "qtc_ms": (350.0, 440.0),
    "qrs_ms": (60.0, 110.0),
}


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    """Per-attribute centre and scale fitted on the training split.

    ``sex`` is passed through (centre 0, scale 1).  Missing values map to
    0 after normalization (the training mean under z-scoring) and are
    flagged so the attribute loss can skip them.
    """

    names: tuple[str, ...]
    center: np.ndarray
    scale: np.ndarray
    method: str = "zscore"

    def apply(self, attrs: AttributeVector) -> tuple[np.ndarray, np.ndarray]:
        """(t_attr, present) where ``present`` is 0 for imputed entries."""
        raw = attrs.as_array(self.names)
        present = ~np.isnan(raw)
        t = np.where(present, (raw - self.center) / self.scale, 0.0)
        return t, present.astype(np.float64)

    def invert(self, t) -> np.ndarray:
        return np.asarray(t, dtype=np.float64) * self.scale + self.center

    def to_kv(self) -> dict[str, str]:
        out = {"norm.method": self.method, "norm.names": ",".join(self.names)}
        for n, c, s in zip(self.names, self.center, self.scale):
            out[f"norm.{n}"] = f"{float(c)!r},{float(s)!r}"
        return out

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "NormalizationStats":
        try:
            names = tuple(values["norm.names"].split(","))
            pairs = [tuple(float(x) for x in values[f"norm.{n}"].split(",")) for n in names]
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad normalization block: {exc}") from None
        return cls(names, np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]),
                   values.get("norm.method", "zscore"))


def fit_normalization(train_attrs: Sequence[AttributeVector], method: str = "zscore",
                      names: Sequence[str] = ATTRIBUTE_NAMES) -> NormalizationStats:
    if len(train_attrs) < 2:
        raise ContractError(f"need >= 2 training records to fit normalization, got {len(train_attrs)}")
    if method not in ("zscore", "reference"):
        raise ConfigError(f"unknown normalization method {method!r}")
    raw = np.stack([a.as_array(names) for a in train_attrs])
    center = np.zeros(len(names))
    scale = np.ones(len(names))
    for j, n in enumerate(names):
        if n == "sex":
            continue
        col = raw[:, j][~np.isnan(raw[:, j])]
        if method == "reference" and n in REFERENCE_RANGES:
            lo, hi = REFERENCE_RANGES[n]
            center[j], scale[j] = lo, hi - lo
            continue
        if col.size < 2:
            raise DataError(f"attribute {n!r} present in fewer than 2 training records")
        sd = float(np.std(col))
        if not sd > 0 or not math.isfinite(sd):
            raise DataError(f"attribute {n!r} has zero variance on the training split")
        center[j], scale[j] = float(np.mean(col)), sd
    return NormalizationStats(tuple(names), center, scale, method)


# -- splits and tiers -------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        for part in ("train", "val", "test"):
            object.__setattr__(self, part, tuple(getattr(self, part)))
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise DataError("dataset splits overlap")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for part in (self.train, self.val, self.test):
            h.update(("\n".join(part) + "\n--\n").encode())
        return h.hexdigest()

    def save(self, path) -> None:
        lines = [f"{part} {rid}" for part in ("train", "val", "test") for rid in getattr(self, part)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        parts: dict[str, list[str]] = {"train": [], "val": [], "test": []}
        for ln in Path(path).read_text().splitlines():
            if ln.strip():
                part, _, rid = ln.partition(" ")
                if part not in parts:
                    raise DataError(f"{path}: unknown split {part!r}")
                parts[part].append(rid.strip())
        return cls(**parts)


def random_split(record_ids: Sequence[str], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    if len(fractions) != 3 or not math.isclose(sum(fractions), 1.0) or min(fractions) < 0:
        raise ConfigError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    ids = np.array(sorted(record_ids))
    ids = ids[np.random.default_rng(seed).permutation(ids.size)]
    n_tr = int(round(fractions[0] * ids.size))
    n_va = int(round(fractions[1] * ids.size))
    return DatasetSplit(tuple(ids[:n_tr]), tuple(ids[n_tr : n_tr + n_va]), tuple(ids[n_tr + n_va :]))


TIERS = ("common", "uncommon", "rare")


def tier_classes(train_counts: dict[str, int] | Sequence[int], thresholds: tuple[int, int] = (10, 50),
                 class_names: Sequence[str] | None = None) -> dict[str, str]:
    """Class -> tier by training count: ``> hi`` common, ``[lo, hi]`` uncommon, ``< lo`` rare."""
    lo, hi = thresholds
    if not 0 <= lo <= hi:
        raise ConfigError(f"tier thresholds must satisfy 0 <= lo <= hi, got {thresholds}")
    if not isinstance(train_counts, dict):
        names = class_names if class_names is not None else [str(i) for i in range(len(train_counts))]
        train_counts = dict(zip(names, (int(c) for c in train_counts)))
    return {
        name: "common" if c > hi else ("rare" if c < lo else "uncommon") for name, c in train_counts.items()
    }


def class_counts(records: Sequence, schema: LabelSchema) -> dict[str, int]:
    counts = label_matrix(records, schema).sum(axis=0) if records else np.zeros(len(schema))
    return {n: int(c) for n, c in zip(schema.class_names, counts)}


def records_checksum(records: Sequence[EcgRecord]) -> str:
    """Order-sensitive digest over ids, sample bytes, labels and masks."""
    h = hashlib.sha256()
    for r in records:
        h.update(r.record_id.encode())
        h.update(np.ascontiguousarray(r.channels, dtype="<f8").tobytes())
        h.update(",".join(r.labels).encode())
        if r.anomaly_mask is not None:
            h.update(r.anomaly_mask.tobytes())
    return h.hexdigest()


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
